"""
Steering run visualization.
Builds a standalone HTML page (Plotly from CDN, no Python plotting dependency) from the
CSV artifacts and manifest of one run directory.
"""

import csv
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict

from src.config import MANIFEST_NAME


def generate_html_report(run_dir: Path, output_path: Path | None = None) -> Path:
    """
    Generate an interactive HTML report for a run directory.

    Args:
        run_dir: Directory holding manifest.json and any of gains.csv, covariance.csv, paths.csv
        output_path: Where to save the page (default: run_dir/report.html)

    Returns:
        Path to generated HTML file
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path} not found")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    tables = {
        name: _read_table(run_dir / f"{name}.csv")
        for name in ("gains", "covariance", "paths")
        if (run_dir / f"{name}.csv").is_file()
    }

    output_path = output_path or run_dir / "report.html"
    output_path.parent.mkdir(parents=True, exist_ok=True)
    output_path.write_text(_build_html_report(manifest, tables), encoding="utf-8")
    return output_path


def _read_table(path: Path) -> Dict[str, list]:
    with open(path, encoding="utf-8", newline="") as fp:
        reader = csv.DictReader(fp)
        columns: Dict[str, list] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, value in row.items():
                columns[name].append(float(value))
    return columns


def _line_traces(table: Dict[str, list], x: str = "t") -> list:
    return [
        {"x": table[x], "y": values, "mode": "lines", "name": name}
        for name, values in table.items()
        if name != x
    ]


def _path_traces(table: Dict[str, list], limit: int = 50) -> list:
    """State-space curves of the first paths (first two state columns)."""
    names = [c for c in table if c not in ("path_id", "t")]
    if len(names) < 2:
        return []
    traces: Dict[int, Dict[str, Any]] = {}
    for pid, a, b in zip(table["path_id"], table[names[0]], table[names[1]]):
        pid = int(pid)
        if pid >= limit:
            continue
        trace = traces.setdefault(
            pid, {"x": [], "y": [], "mode": "lines", "line": {"width": 1}, "showlegend": False}
        )
        trace["x"].append(a)
        trace["y"].append(b)
    return list(traces.values())


def _status_class(status: str) -> str:
    return "pass" if status in ("converged", "passed", "completed") else "fail"


def _build_html_report(manifest: Dict[str, Any], tables: Dict[str, Dict[str, list]]) -> str:
    charts = []
    if "gains" in tables:
        charts.append(("gains", "Feedback gains K(t)", _line_traces(tables["gains"])))
    if "covariance" in tables:
        charts.append(("covariance", "State covariance entries", _line_traces(tables["covariance"])))
    if "paths" in tables:
        charts.append(("paths", "Sample paths (phase plane)", _path_traces(tables["paths"])))

    residual_rows = "\n".join(
        f"<tr><td>{name}</td><td>{value}</td></tr>"
        for name, value in (manifest.get("residuals") or {}).items()
    )
    chart_divs = "\n".join(f'<h2>{title}</h2><div id="{key}" class="chart"></div>' for key, title, _ in charts)
    chart_js = "\n".join(
        f"Plotly.newPlot('{key}', {json.dumps(traces)}, {{margin: {{t: 20}}, xaxis: {{title: '{'x' if key == 'paths' else 't'}'}}}});"
        for key, _, traces in charts
    )
    status = str(manifest.get("status"))

    return f"""<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>Steering run - {manifest.get('method')}</title>
    <script src="https://cdn.plot.ly/plotly-2.27.0.min.js"></script>
    <style>
        body {{ font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, sans-serif; margin: 2em; color: #333; }}
        .status {{ display: inline-block; padding: 4px 12px; border-radius: 12px; font-weight: 600; }}
        .status.pass {{ background: #d4edda; color: #155724; }}
        .status.fail {{ background: #f8d7da; color: #721c24; }}
        table {{ border-collapse: collapse; margin: 1em 0; }}
        td {{ border: 1px solid #ddd; padding: 4px 10px; }}
        .chart {{ width: 100%; height: 420px; }}
    </style>
</head>
<body>
    <h1>Steering run: {manifest.get('method')}</h1>
    <p><span class="status {_status_class(status)}">{status}</span>
       n={manifest.get('n')}, m={manifest.get('m')}, N={manifest.get('N')},
       iterations={manifest.get('iterations')}, objective={manifest.get('objective')},
       wall time {manifest.get('wall_ms')} ms</p>
    <table>{residual_rows}</table>
    {chart_divs}
    <p style="color: #888">Generated {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}</p>
    <script>
{chart_js}
    </script>
</body>
</html>
"""


if __name__ == "__main__":
    import sys

    if len(sys.argv) > 1:
        html_path = generate_html_report(Path(sys.argv[1]))
        print(f"✅ Generated interactive report: {html_path}")
    else:
        print("Usage: python -m src.visualize <run_dir>")
