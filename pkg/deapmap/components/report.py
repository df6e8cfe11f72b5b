from dataclasses import dataclass
from html import escape
from pathlib import Path

from deapmap.evaluation import ComparisonReport, GateResult, Summary

PAGE_STYLE = """
body { font-family: sans-serif; background: #1f2933; color: #e4e7eb; margin: 2rem; }
h1 { border-bottom: 2px solid #c0392b; padding-bottom: .4rem; }
h2 { margin-top: 2.5rem; }
.grid { display: flex; flex-wrap: wrap; gap: 1.2rem; }
.card { background: #323f4b; border: 1px solid #52606d; border-radius: 8px; padding: 1rem; }
.card img { max-width: 520px; background: white; }
.badge { display: inline-block; padding: .1rem .6rem; border-radius: 999px; font-size: .8rem; }
.pass { background: #27ae60; } .fail { background: #c0392b; }
table { border-collapse: collapse; } td, th { padding: .25rem .7rem; border-bottom: 1px solid #52606d; }
"""


@dataclass
class Panel:
    title: str
    src: str
    caption: str = ""


def _badge(ok: bool) -> str:
    """A small pass/fail badge."""
    return f'<span class="badge {"pass" if ok else "fail"}">{"pass" if ok else "fail"}</span>'


def _figure_card(panel: Panel) -> str:
    """Card to display one figure file."""
    caption = f"<p>{escape(panel.caption)}</p>" if panel.caption else ""
    return (
        '<div class="card">'
        f"<h3>{escape(panel.title)}</h3>"
        f'<img src="{escape(panel.src)}" alt="{escape(panel.title)}">'
        f"{caption}</div>"
    )


def _fmt(value: float | None) -> str:
    """Three decimals, or n/a for missing values."""
    return "n/a" if value is None else f"{value:.3f}"


def _summary_row(name: str, summary: Summary) -> str:
    """One table row of SSIM quartiles."""
    cells = [summary.n, _fmt(summary.mean), _fmt(summary.q1), _fmt(summary.median), _fmt(summary.q3)]
    return f"<tr><td>{escape(name)}</td>" + "".join(f"<td>{c}</td>" for c in cells) + "</tr>"


def _summary_table(report: ComparisonReport) -> str:
    """SSIM quartiles per design and pipeline."""
    rows = []
    for design in [None] + report.designs():
        label = design or "all"
        for pipeline in ("deap", "baseline"):
            rows.append(_summary_row(f"{label} / {pipeline}", report.summary(pipeline, design)))
    header = "<tr><th>group</th><th>n</th><th>mean</th><th>q1</th><th>median</th><th>q3</th></tr>"
    return f'<div class="card"><table>{header}{"".join(rows)}</table></div>'


def _gate_card(gate: GateResult) -> str:
    """Card summarising the trend criteria on held-out episodes."""
    items = [
        f"<li>DEAP beats activation map in {gate.win_rate:.0%} of {gate.n} rows {_badge(gate.win_rate_ok)}</li>",
        f"<li>mean DEAP SSIM {gate.mean_deap:.3f} {_badge(gate.mean_deap_ok)}</li>",
        f"<li>mean activation-map SSIM {gate.mean_baseline:.3f} {_badge(gate.margin_ok)}</li>",
        f"<li>DEAP higher in every case: {'yes' if gate.all_cases else 'no'}</li>",
        f"<li>reference means: DEAP {gate.reported_deap_mean}, activation map {gate.reported_baseline_mean}</li>",
    ]
    return f'<div class="card"><h3>Trend criteria {_badge(gate.passed)}</h3><ul>{"".join(items)}</ul></div>'


def _failed_rows(report: ComparisonReport) -> str:
    """List of rows that could not be scored, with their cause."""
    failed = [row for row in report.rows if row.status == "failed"]
    if not failed:
        return ""
    items = "".join(
        f"<li>{escape(row.episode_id)} ({escape(row.array_name)}): {escape(row.cause or '')}</li>" for row in failed
    )
    return f'<div class="card"><h3>Failed rows</h3><ul>{items}</ul></div>'


def _section(title: str, body: str) -> str:
    """Titled section wrapping a block of cards."""
    return f'<h2>{escape(title)}</h2><div class="grid">{body}</div>'


def report_page(
    report: ComparisonReport,
    gate: GateResult,
    strips: list[Panel],
    maps: list[Panel],
    summary_figures: list[Panel],
    title: str = "DEAP mapping report",
) -> str:
    """The static index page bundling every figure of a run."""
    body = [
        f"<h1>{escape(title)}</h1>",
        _section("Comparison", _gate_card(gate) + _summary_table(report) + _failed_rows(report)),
        _section("Summary figures", "".join(_figure_card(p) for p in summary_figures)),
        _section("Frame strips", "".join(_figure_card(p) for p in strips)),
        _section("Phase variance and isochrones", "".join(_figure_card(p) for p in maps)),
    ]
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">"
        f"<title>{escape(title)}</title><style>{PAGE_STYLE}</style></head>"
        f"<body>{''.join(body)}</body></html>\n"
    )


def write_report(directory: str | Path, **kwargs) -> Path:
    """Render the page into index.html."""
    path = Path(directory) / "index.html"
    path.write_text(report_page(**kwargs), encoding="utf-8")
    return path
