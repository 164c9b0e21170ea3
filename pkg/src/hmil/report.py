"""Self-contained HTML rendering of an inferred schema.

One section per schema position, showing occurrence counts, presence ratios,
leaf-value top lists, and list-length histograms as inline bars. Output is a
single static page with no external assets, byte-identical for equal schemas.
"""

from __future__ import annotations

import html
from typing import Optional

from .schema import (
    DictSchema,
    LeafSchema,
    ListSchema,
    PolymorphicSchema,
    SchemaNode,
    total_count,
)

_STYLE = """
body { font-family: sans-serif; margin: 2em; color: #222; }
h1 { font-size: 1.4em; }
h2 { font-size: 1.0em; font-family: monospace; background: #eef; padding: 4px 8px; }
table { border-collapse: collapse; margin: 0.5em 0 1.5em 1em; }
td, th { padding: 2px 10px; text-align: left; font-size: 0.85em; }
th { border-bottom: 1px solid #999; }
.bar { background: #69c; height: 10px; display: inline-block; }
.meta { color: #666; font-size: 0.85em; margin-left: 1em; }
.warn { color: #a40; font-weight: bold; margin-left: 1em; }
"""


def _bar(count: int, biggest: int) -> str:
    pct = 100.0 * count / biggest if biggest else 0.0
    return f'<span class="bar" style="width:{pct:.1f}px"></span>'


def _fmt_num(x) -> str:
    if x is None:
        return "-"
    return f"{float(x):.6g}"


def _render_node(schema: Optional[SchemaNode], path: str, parent_count: int,
                 out: list[str]) -> None:
    count = total_count(schema)
    ratio = count / parent_count if parent_count else 0.0
    out.append(f"<h2>{html.escape(path)}</h2>")
    out.append(f'<div class="meta">occurrences: {count} &middot; '
               f'presence ratio: {ratio:.3f}</div>')
    if schema is None:
        out.append('<div class="meta">never observed</div>')
        return
    if isinstance(schema, LeafSchema):
        kinds = ", ".join(f"{k}: {v}" for k, v in sorted(schema.kinds.items()))
        out.append(f'<div class="meta">value kinds &mdash; {html.escape(kinds)}</div>')
        if schema.stats.count:
            s = schema.stats
            out.append(f'<div class="meta">numeric: min {_fmt_num(s.vmin)}, '
                       f'max {_fmt_num(s.vmax)}, mean {_fmt_num(s.mean)}, '
                       f'stddev {_fmt_num(s.stddev)}</div>')
        if schema.saturated:
            out.append(f'<div class="warn">&ge; {len(schema.histogram)} distinct values '
                       f'(histogram saturated)</div>')
        top = sorted(schema.histogram.items(), key=lambda kv: (-kv[1], kv[0]))[:20]
        if top:
            biggest = top[0][1]
            out.append("<table><tr><th>value</th><th>count</th><th></th></tr>")
            for key, n in top:
                out.append(f"<tr><td>{html.escape(key)}</td><td>{n}</td>"
                           f"<td>{_bar(n, biggest)}</td></tr>")
            out.append("</table>")
        return
    if isinstance(schema, ListSchema):
        lengths = sorted(schema.lengths.items())
        biggest = max((n for _, n in lengths), default=0)
        out.append("<table><tr><th>list length</th><th>count</th><th></th></tr>")
        for length, n in lengths:
            out.append(f"<tr><td>{length}</td><td>{n}</td><td>{_bar(n, biggest)}</td></tr>")
        out.append("</table>")
        _render_node(schema.child, path + "[]", total_count(schema.child), out)
        return
    if isinstance(schema, DictSchema):
        out.append("<table><tr><th>key</th><th>present</th><th>ratio</th></tr>")
        for key, entry in sorted(schema.entries.items()):
            r = entry.present / schema.count if schema.count else 0.0
            out.append(f"<tr><td>{html.escape(key)}</td><td>{entry.present}</td>"
                       f"<td>{r:.3f}</td></tr>")
        out.append("</table>")
        for key, entry in sorted(schema.entries.items()):
            _render_node(entry.child, f"{path}.{key}", schema.count, out)
        return
    if isinstance(schema, PolymorphicSchema):
        out.append('<div class="warn">documents disagree on the container kind here</div>')
        for shape, branch in sorted(schema.branches.items()):
            _render_node(branch, f"{path}({shape})", count, out)
        return


def render_report(schema: Optional[SchemaNode]) -> str:
    """Render the schema as one self-contained static HTML document."""
    n_docs = total_count(schema)
    body: list[str] = [f"<h1>Schema of {n_docs} documents</h1>"]
    if schema is None:
        body.append('<div class="meta">The corpus was empty; nothing to summarize.</div>')
    else:
        _render_node(schema, "$", n_docs, body)
    parts = [
        "<!doctype html>",
        '<html><head><meta charset="utf-8"><title>Schema report</title>',
        f"<style>{_STYLE}</style></head><body>",
        *body,
        "</body></html>",
    ]
    return "\n".join(parts) + "\n"
