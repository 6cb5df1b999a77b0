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

from gridclip.backbone import AttentionPool, Backbone, FileTeacher, SeededTeacher, attention_pool, create_teacher, \
        global_avg_pool, load_teacher_table, save_teacher_table, teacher_embed
from gridclip.config import ExperimentConfig
from gridclip.data import BACKGROUND, SHAPES, CategorySpec, render_image, render_object
from gridclip.losses import grad_check
from gridclip.utils import ConfigError, InputError, TeacherLookupError


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return Backbone()


def test_backbone_shapes(backbone):
    """
    Test strides 8, 16 and 32 for C3, C4 and C5.
    """
    feats = backbone(torch.rand(2, 3, 128, 96))
    assert tuple(feats.c3.shape) == (2, 32, 16, 12)
    assert tuple(feats.c4.shape) == (2, 64, 8, 6)
    assert tuple(feats.c5.shape) == (2, 128, 4, 3)
    assert backbone.out_channels == (32, 64, 128)


@pytest.mark.parametrize('shape', [(1, 1, 64, 64), (1, 3, 16, 64), (1, 3, 100, 96), (3, 64)])
def test_backbone_bad_input(backbone, shape):
    with pytest.raises(InputError):
        backbone(torch.rand(*shape))


def test_zeroed_final_conv(backbone):
    """
    Test that with a zeroed final convolution C5 is the ReLU of its bias.
    """
    conv = backbone.final_conv
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.copy_(torch.linspace(-1.0, 1.0, conv.out_channels))
    c5 = backbone(torch.rand(1, 3, 64, 64)).c5
    expected = torch.relu(conv.bias)[None, :, None, None].expand_as(c5)
    assert torch.allclose(c5, expected)


def test_global_avg_pool():
    c5 = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
    assert torch.allclose(global_avg_pool(c5), torch.tensor([2.5]))
    with pytest.raises(InputError):
        global_avg_pool(torch.zeros(1, 4, 0, 3))


def test_attention_pool_shapes():
    torch.manual_seed(0)
    pool = AttentionPool(128, (4, 4), n_heads=4, out_dim=32)
    pair = attention_pool(torch.rand(2, 128, 4, 4), pool)
    assert tuple(pair.z_bar.shape) == (2, 32)
    assert tuple(pair.z.shape) == (2, 32, 4, 4)


def test_attention_pool_uniform():
    """
    Test that with zero queries and keys every token attends uniformly, so
    z_bar and all of z coincide.
    """
    torch.manual_seed(0)
    pool = AttentionPool(16, (2, 2), n_heads=2)
    with torch.no_grad():
        for proj in (pool.q_proj, pool.k_proj):
            proj.weight.zero_()
            proj.bias.zero_()
    pair = pool(torch.rand(1, 16, 2, 2))
    expected = pair.z_bar[:, :, None, None].expand_as(pair.z)
    assert torch.allclose(pair.z, expected, atol=1e-6)


def test_attention_pool_resized_grid():
    """
    Test that the positional embedding is resized for a different grid.
    """
    pool = AttentionPool(16, (4, 4), n_heads=2)
    assert pool.positional(4, 4) is pool.positional_embedding
    assert tuple(pool.positional(3, 2).shape) == (1 + 6, 16)
    pair = pool(torch.rand(1, 16, 3, 2))
    assert tuple(pair.z.shape) == (1, 16, 3, 2)


def test_attention_pool_permutation():
    """
    Test that without a positional embedding, permuting the grid cells
    permutes z the same way and leaves z_bar unchanged.
    """
    torch.manual_seed(0)
    pool = AttentionPool(16, (3, 4), n_heads=2)
    with torch.no_grad():
        pool.positional_embedding.zero_()
    c5 = torch.rand(2, 16, 3, 4)
    perm = torch.randperm(12)
    shuffled = c5.flatten(2)[:, :, perm].reshape(2, 16, 3, 4)
    a, b = pool(c5), pool(shuffled)
    assert torch.allclose(a.z_bar, b.z_bar, atol=1e-5)
    assert torch.allclose(a.z.flatten(2)[:, :, perm], b.z.flatten(2), atol=1e-5)


def test_backbone_translation(backbone):
    """
    Test that shifting the input right by 32 pixels shifts C5 by one cell,
    away from the zero-padded border.
    """
    torch.manual_seed(1)
    x = torch.rand(1, 3, 384, 384)
    shifted = torch.rand(1, 3, 384, 384)
    shifted[..., 32:] = x[..., :-32]
    with torch.no_grad():
        a = backbone(x).c5
        b = backbone(shifted).c5
    assert torch.allclose(b[..., 4:8, 5:9], a[..., 4:8, 4:8], atol=1e-4)


def test_backbone_gradients():
    """
    Test autograd through the backbone against float64 central differences
    on a 3x32x32 input.
    """
    torch.manual_seed(0)
    net = Backbone().double()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: net(x).c5.sum(), [x]) < 1e-4
    assert grad_check(lambda: net(x).c5.sum(), list(net.parameters())) < 1e-4


def test_attention_pool_bad_heads():
    with pytest.raises(ConfigError):
        AttentionPool(10, (2, 2), n_heads=4)


def _render(specs, index=0):
    image, _ = render_image(0, index, specs, (128, 128))
    return image


def _spec(color, texture, shape):
    return CategorySpec(f'{color}_{texture}_{shape}', color, texture, shape, 1, 'rare', 'novel')


def test_teacher_frozen():
    """
    Test that the teacher has no trainable parameters and stays in eval mode.
    """
    teacher = create_teacher(ExperimentConfig())
    assert isinstance(teacher, SeededTeacher)
    assert all(not p.requires_grad for p in teacher.parameters())
    teacher.train()
    assert not teacher.training
    out = teacher_embed([_render([_spec('red', 'solid', 'cross')])], ['a'], teacher)
    assert tuple(out.shape) == (1, 64)
    assert not out.requires_grad


def test_teacher_deterministic():
    images = [_render([_spec('red', 'solid', 'cross')]), _render([_spec('blue', 'hstriped', 'ellipse')], 1)]
    a = create_teacher(ExperimentConfig(), seed=3).embed(images, ['a', 'b'])
    b = create_teacher(ExperimentConfig(), seed=3).embed(images, ['a', 'b'])
    assert torch.equal(a, b)


def test_teacher_separates_categories():
    """
    Test that images of different categories get clearly different embeddings.
    """
    teacher = create_teacher(ExperimentConfig())
    images = [
        _render([_spec('red', 'solid', 'cross')]),
        _render([_spec('blue', 'checkered', 'triangle'), _spec('green', 'vstriped', 'rectangle')]),
    ]
    z = teacher.embed(images, ['a', 'b'])
    cos = torch.nn.functional.cosine_similarity(z[0], z[1], dim=0)
    assert float(cos) < 0.99


def _single(shape, color='red', texture='solid'):
    canvas = np.full((3, 128, 128), BACKGROUND, dtype=np.float64)
    render_object(canvas, (32, 32, 96, 96), _spec(color, texture, shape))
    return canvas.astype(np.float32)


def test_teacher_sees_shape():
    """
    Test that images differing only in object shape get clearly different
    embeddings, and that the shape evidence picks the rendered shape.
    """
    teacher = create_teacher(ExperimentConfig())
    images = [_single(shape) for shape in SHAPES]
    z = torch.nn.functional.normalize(teacher.embed(images, list(SHAPES)), dim=1)
    cos = z @ z.t()
    for i in range(len(SHAPES)):
        for j in range(i + 1, len(SHAPES)):
            assert float(cos[i, j]) < 0.99, (SHAPES[i], SHAPES[j])
    x = torch.as_tensor(np.stack(images))
    assert teacher.shape_evidence(x).argmax(dim=1).tolist() == list(range(len(SHAPES)))


def test_teacher_shape_texture_independent():
    """
    Test that the foreground used for shape covers darkened texture too.
    """
    teacher = create_teacher(ExperimentConfig())
    x = torch.as_tensor(np.stack([_single('cross', 'blue', t) for t in ('solid', 'checkered')]))
    mask = teacher.foreground(x)
    assert torch.equal(mask[0], mask[1])
    assert teacher.shape_evidence(x).argmax(dim=1).tolist() == [3, 3]
    blank = torch.full((1, 3, 64, 64), BACKGROUND)
    assert torch.equal(teacher.shape_evidence(blank), torch.zeros(1, 4))


def test_teacher_unknown_backend():
    with pytest.raises(ConfigError):
        create_teacher(ExperimentConfig(teacher_backend='clip'))


def test_file_teacher(testdir):
    """
    Test lookup by image id, including a missing id.
    """
    path = os.path.join(testdir, 'teacher.json')
    save_teacher_table({'000001': [1.0, 0.0, 0.0], '000002': [0.0, 2.0, 0.0]}, path)
    assert load_teacher_table(path)['000002'] == [0.0, 2.0, 0.0]
    teacher = create_teacher(ExperimentConfig(teacher_backend='file', teacher_file=path, teacher_dim=3))
    assert isinstance(teacher, FileTeacher)
    blank = np.zeros((3, 32, 32), dtype=np.float32)
    out = teacher.embed([blank, blank], ['000002', '000001'])
    assert torch.equal(out, torch.tensor([[0.0, 2.0, 0.0], [1.0, 0.0, 0.0]]))
    with pytest.raises(TeacherLookupError):
        teacher.embed([blank], ['000003'])


def test_file_teacher_errors():
    with pytest.raises(InputError):
        FileTeacher({})
    with pytest.raises(InputError):
        FileTeacher({'a': [1.0], 'b': [1.0, 2.0]})
    with pytest.raises(ConfigError):
        FileTeacher({'a': [1.0, 2.0]}, dim=3)
