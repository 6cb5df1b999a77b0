"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

import os

import numpy as np
import pytest
import torch

from gridclip.config import ExperimentConfig
from gridclip.data import AnnotatedImage, CategorySpec, CorpusManifest
from gridclip.detector import GridCLIPDetector
from gridclip.evaluation import EvalReport, ap_by_frequency, bucket_ap, category_count_histogram, compute_ap, \
        envelope_ap, evaluate, moving_average_curve, open_set_eval, rc_at_k, read_ap_curve_csv, \
        read_histogram_csv, read_rc_csv, report_from_detections, transfer_eval, write_ap_curve_csv, \
        write_histogram_csv, write_rc_csv
from gridclip.postprocess import DetectionSet, iou
from gridclip.textbank import EmbeddingBank
from gridclip.utils import BankError, InputError


def _image(image_id, boxes, labels):
    return AnnotatedImage(image_id, np.zeros((3, 32, 32), dtype=np.float32),
                          np.asarray(boxes, dtype=np.float32).reshape(-1, 4), list(labels))


def _dets(image_id, boxes, scores, category='a'):
    n = len(scores)
    return DetectionSet(image_id, np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                        np.asarray(scores, dtype=np.float64), np.zeros(n, dtype=np.int64), [category] * n)


def test_ap_examples():
    """
    Test a perfect match, no detections, and a false positive ranked above
    the only true positive.
    """
    images = [_image('0', [[0, 0, 10, 10]], ['a'])]
    hit = _dets('0', [[0, 0, 10, 9]], [0.9])
    assert compute_ap([hit], images, ['a'], [0.5]) == {'a': 1.0}
    assert compute_ap([_dets('0', [], [])], images, ['a']) == {'a': 0.0}
    fp_first = _dets('0', [[20, 20, 30, 30], [0, 0, 10, 10]], [0.95, 0.90])
    assert compute_ap([fp_first], images, ['a']) == {'a': 0.5}


def test_ap_excluded():
    images = [_image('0', [[0, 0, 10, 10]], ['a'])]
    table = compute_ap([_dets('0', [[0, 0, 10, 10]], [0.9])], images, ['a', 'b'])
    assert list(table) == ['a']


def test_envelope_ap():
    assert envelope_ap(np.array([]), np.array([])) == 0.0
    assert envelope_ap(np.array([1.0, 0.5, 2 / 3]), np.array([0.5, 0.5, 1.0])) == pytest.approx(0.5 + 0.5 * 2 / 3)


def oracle_ap(gt_by_image, dets, threshold):
    """
    Greedy matching by descending score and the all-point interpolated AP,
    built one detection at a time.
    """
    n_gt = sum(len(g) for g in gt_by_image.values())
    used = {i: [False] * len(g) for i, g in gt_by_image.items()}
    ranked = sorted(range(len(dets)), key=lambda d: -dets[d][2])
    flags = []
    for d in ranked:
        image, box, _ = dets[d]
        best, best_iou = None, -1.0
        for j, gt in enumerate(gt_by_image.get(image, [])):
            if used[image][j]:
                continue
            v = iou(box, gt)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= threshold:
            used[image][best] = True
            flags.append(True)
        else:
            flags.append(False)
    precision, tp = [], 0
    for r, flag in enumerate(flags, 1):
        tp += flag
        precision.append(tp / r)
    return sum(max(precision[r:]) / n_gt for r, flag in enumerate(flags) if flag)


def test_ap_oracle():
    """
    Test compute_ap against the oracle on 100 random scenes.
    """
    rng = np.random.default_rng(0)
    for _ in range(100):
        gt_by_image, images = {}, []
        for i in range(2):
            n = int(rng.integers(0, 4))
            xy = rng.uniform(0, 40, size=(n, 2))
            boxes = np.concatenate([xy, xy + rng.uniform(5, 20, size=(n, 2))], axis=1).astype(np.float32)
            gt_by_image[str(i)] = [b.astype(np.float64) for b in boxes]
            images.append(_image(str(i), boxes, ['a'] * n))
        if not sum(len(g) for g in gt_by_image.values()):
            continue
        dets, sets = [], []
        for i in range(2):
            m = int(rng.integers(0, 5))
            gts = gt_by_image[str(i)]
            boxes = []
            for _ in range(m):
                if gts and rng.random() < 0.7:
                    boxes.append(gts[int(rng.integers(len(gts)))] + rng.normal(0, 2, size=4))
                else:
                    xy = rng.uniform(0, 40, size=2)
                    boxes.append(np.concatenate([xy, xy + rng.uniform(5, 20, size=2)]))
            scores = rng.uniform(0.05, 1.0, size=m)
            dets.extend((str(i), b, s) for b, s in zip(boxes, scores))
            sets.append(_dets(str(i), boxes, scores))
        threshold = float(rng.choice([0.5, 0.75]))
        got = compute_ap(sets, images, ['a'], [threshold])['a']
        assert got == pytest.approx(oracle_ap(gt_by_image, dets, threshold), abs=1e-12)


def _manifest(freqs):
    cats = []
    for name, f in freqs.items():
        bucket = 'rare' if f <= 10 else 'common' if f <= 100 else 'frequent'
        cats.append(CategorySpec(name, 'red', 'solid', 'cross', f, bucket, 'novel' if bucket == 'rare' else 'base'))
    return CorpusManifest(cats, 0, {'train': 0, 'val': 0})


def test_bucket_ap():
    manifest = _manifest({'r': 5, 'c': 50, 'f': 500, 'f2': 300})
    out = bucket_ap({'r': 0.1, 'c': 0.2, 'f': 0.3, 'f2': 0.5}, manifest)
    assert out.ap_r == pytest.approx(0.1)
    assert out.ap_c == pytest.approx(0.2)
    assert out.ap_f == pytest.approx(0.4)
    assert out.ap == pytest.approx(0.275)
    fewer = bucket_ap({'r': 0.1, 'c': 0.2, 'f2': 0.5}, manifest)
    assert fewer.ap_r == out.ap_r and fewer.ap_c == out.ap_c
    assert bucket_ap({'c': 0.2}, manifest).ap_r is None

def test_bucket_ap_constant():
    """
    Test that when every category has AP v, every aggregate is exactly v.
    """
    manifest = _manifest({'r': 5, 'c': 50, 'f': 500, 'f2': 300})
    for v in (0.7, 0.1, 1.0 / 3.0):
        same = bucket_ap({'r': v, 'c': v, 'f': v, 'f2': v}, manifest)
        assert same.ap_r == v
        assert same.ap_c == v
        assert same.ap_f == v
        assert same.ap == v


def test_report_splits():
    manifest = _manifest({'r': 5, 'f': 500})
    bank = EmbeddingBank(['f', 'r'], np.eye(2), split=['base', 'novel'])
    images = [_image('0', [[0, 0, 10, 10], [20, 20, 30, 30]], ['f', 'r'])]
    dets = [DetectionSet('0', np.array([[0, 0, 10, 10.0]]), np.array([0.9]), np.array([0]), ['f'])]
    report = report_from_detections(dets, images, bank, manifest, {'nms_iou': 0.5})
    assert report.ap_base == 1.0 and report.ap_novel == 0.0
    assert report.ap50 == 0.5 and report.ap75 == 0.5
    assert report.settings == {'nms_iou': 0.5}


def test_report_json(testdir):
    report = EvalReport({'a': 0.5}, 0.5, None, 0.5, None, 0.6, 0.4, 0.5, None, ['b'], {'nms_iou': 0.5})
    path = os.path.join(testdir, 'report.json')
    report.to_json(path)
    assert EvalReport.from_json(path) == report


def test_rc_at_k_example():
    """
    Test ground truth {a, b} ranked first and third.
    """
    bank = EmbeddingBank(['a', 'b', 'c', 'd'], np.eye(4))
    images = [_image('0', [[0, 0, 1, 1], [0, 0, 2, 2]], ['a', 'b'])]
    out = rc_at_k(np.array([[4.0, 2.0, 3.0, 1.0]]), bank, images, [1, 2, 3, 4])
    assert out.recall == {1: 0.5, 2: 0.5, 3: 1.0, 4: 1.0}
    assert out.n_images == 1 and out.n_skipped == 0


def test_rc_at_k_properties(corpus, full_bank):
    """
    Test monotonicity in k, recall 1 at k = K and skipped empty images.
    """
    _, images = corpus
    rng = np.random.default_rng(0)
    images = list(images[:50]) + [_image('empty', [], [])]
    emb = rng.standard_normal((len(images), full_bank.dim))
    k_list = list(range(1, len(full_bank) + 1))
    out = rc_at_k(emb, full_bank, images, k_list)
    values = [out.recall[k] for k in k_list]
    assert all(a <= b for a, b in zip(values, values[1:]))
    assert out.recall[len(full_bank)] == 1.0
    assert out.n_skipped == 1 and out.n_images == 50
    with pytest.raises(BankError):
        rc_at_k(emb[:, :3], full_bank, images)
    with pytest.raises(InputError):
        rc_at_k(emb[:3], full_bank, images)
    torch_out = rc_at_k(torch.as_tensor(emb), full_bank, images, k_list)
    assert torch_out.recall == out.recall


def test_histogram():
    images = [_image('0', [[0, 0, 1, 1]], ['a']), _image('1', [[0, 0, 1, 1]] * 2, ['b', 'b']),
              _image('2', [[0, 0, 1, 1]] * 2, ['a', 'b'])]
    hist = category_count_histogram(images)
    assert hist == pytest.approx({1: 2 / 3, 2: 1 / 3})
    assert category_count_histogram(images[:1]) == {1: 1.0}
    assert category_count_histogram([]) == {}


def test_moving_average():
    """
    Test that an impulse of 21 spreads to 1.0 over its 21 wide window.
    """
    v = np.zeros(60)
    v[30] = 21.0
    out = moving_average_curve(v)
    assert np.allclose(out[20:41], 1.0)
    assert np.all(out[:20] == 0) and np.all(out[41:] == 0)
    assert np.allclose(moving_average_curve(np.full(7, 0.3)), 0.3)
    assert len(moving_average_curve([])) == 0
    assert moving_average_curve([1.0, 2.0, 3.0], (-1, 1)).tolist() == [1.5, 2.0, 2.5]
    with pytest.raises(InputError):
        moving_average_curve([1.0], (1, 2))


def test_ap_by_frequency():
    manifest = _manifest({'x': 50, 'a': 50, 'r': 5})
    rows = ap_by_frequency({'x': 0.2, 'a': 0.4, 'r': 0.6}, manifest, (-1, 1))
    assert [r.category for r in rows] == ['r', 'a', 'x']
    assert [r.smoothed for r in rows] == pytest.approx([0.5, 0.4, 0.3])


def test_csv_files(testdir):
    """
    Test that every plot-data file reads back bitwise.
    """
    manifest = _manifest({'x': 50, 'a': 50, 'r': 5})
    rows = ap_by_frequency({'x': 0.1, 'a': 1 / 3, 'r': 2 / 7}, manifest)
    path = os.path.join(testdir, 'curve.csv')
    write_ap_curve_csv(rows, path)
    assert read_ap_curve_csv(path) == rows

    bank = EmbeddingBank(['a', 'b', 'c'], np.eye(3))
    images = [_image('0', [[0, 0, 1, 1]] * 2, ['a', 'c']), _image('1', [[0, 0, 1, 1]], ['b'])]
    rc = rc_at_k(np.array([[0.1, 0.7, 0.2], [0.3, 0.3, 0.4]]), bank, images, [1, 2, 3])
    path = os.path.join(testdir, 'rc.csv')
    write_rc_csv(rc, path)
    assert read_rc_csv(path) == rc.recall

    hist = category_count_histogram(images)
    path = os.path.join(testdir, 'hist.csv')
    write_histogram_csv(hist, path)
    assert read_histogram_csv(path) == hist


def test_transfer_identity(corpus, val_images, full_bank):
    """
    Test that transfer with the training bank at the closed-set NMS IoU is
    the closed-set evaluation, and that transfer defaults to 0.6.
    """
    manifest, _ = corpus
    torch.manual_seed(0)
    config = ExperimentConfig()
    model = GridCLIPDetector(config)
    images = val_images[:4]
    closed = evaluate(model, full_bank, images, manifest, config)
    same = transfer_eval(model, full_bank, images, manifest, config, nms_iou=config.nms_iou)
    assert same.to_dict() == closed.to_dict()
    default = transfer_eval(model, full_bank, images, manifest, config)
    assert default.settings['nms_iou'] == 0.6
    assert default.ap50 is not None and default.ap75 is not None


def test_open_set_empty_novel(corpus, val_images, base_bank):
    manifest, _ = corpus
    torch.manual_seed(0)
    config = ExperimentConfig()
    model = GridCLIPDetector(config)
    images = val_images[:4]
    closed = evaluate(model, base_bank, images, manifest, config)
    opened = open_set_eval(model, base_bank, [], None, images, manifest, config)
    assert opened.to_dict() == closed.to_dict()
    assert closed.ap_novel is None
