"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    2026-Oct-18  Created this.
"""

try:
    from importlib.metadata import version as _pkg_version
    __version__ = _pkg_version('gridclip')
except Exception:
    __version__ = 'unknown'
