"""
    gridclip - Grid-level CLIP alignment for open-vocabulary detection
    Copyright (C) 2026  gridclip contributors

    Distributed under the GNU Lesser General Public License, version 2.1
    or later. See <https://www.gnu.org/licenses/>.

    The AliasedGroup class follows the click documentation's alias recipe and
    is covered under the click license.

    2026-Oct-18  Created this.
"""

import click


class AliasedGroup(click.Group):
    """
    A click group that resolves unambiguous command prefixes, so
    `gridclip trai` runs `train` and `gridclip an` runs `analyze-rc`.
    """
    def get_command(self, ctx, cmd_name):
        rv = click.Group.get_command(self, ctx, cmd_name)
        if rv is not None:
            return rv
        matches = [x for x in self.list_commands(ctx) if x.startswith(cmd_name)]
        if not matches:
            return None
        if len(matches) == 1:
            return click.Group.get_command(self, ctx, matches[0])
        ctx.fail(f'Ambiguous command {cmd_name}, could be: {", ".join(sorted(matches))}')

    def resolve_command(self, ctx, args):
        # Report the full command name in usage errors
        _, cmd, args = super().resolve_command(ctx, args)
        return cmd.name, cmd, args
