"""
Wiener Lab Report Generator
Renders the CSV tables of a lab run as a single HTML page with plotly charts

Usage:
    python reports/generate_report.py                   # results/
    python reports/generate_report.py --results out/    # another run directory
"""

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go
from jinja2 import Environment, FileSystemLoader

# Configuration
REPORTS_DIR = Path(__file__).parent         # reports/
PROJECT_DIR = REPORTS_DIR.parent
TEMPLATE_DIR = REPORTS_DIR / 'templates'
REPORT_NAME = 'lab_report.html'

COLORS = ['#4361EE', '#F02849', '#10B981', '#F59E0B', '#8B5CF6', '#6B7280']
LAYOUT = dict(height=380, hovermode='x unified',
              legend=dict(orientation='h', yanchor='bottom', y=1.02, xanchor='right', x=1))


def _curve_traces(fig, frame, label_col='method'):
    for i, (label, part) in enumerate(frame.groupby(label_col, sort=True)):
        color = COLORS[i % len(COLORS)]
        fig.add_trace(go.Scatter(
            x=part['r'], y=part['estimate'], name=str(label), mode='lines',
            line=dict(width=2, color=color),
            error_y=dict(type='data', array=2.0 * part['stderr'], visible=True, thickness=1),
            hovertemplate='r=%{x:.4g}<br>%{y:.5g}<extra></extra>'))


def density_figure(curves):
    """f1 by kernel, Malliavin and Laplace-inversion routes (X = 1 rows only)."""
    keep = curves[curves['method'].isin(['kde', 'malliavin', 'laplace-inversion'])]
    fig = go.Figure()
    _curve_traces(fig, keep)
    fig.update_layout(title='Density of g = 1/2 |B|^2_H', xaxis_title='r',
                      yaxis_title='f1(r)', **LAYOUT)
    return fig


def ladder_figure(ladders):
    """Slab estimates against eps, one trace per (X, r)."""
    fig = go.Figure()
    for i, ((xid, r), part) in enumerate(ladders.groupby(['X', 'r'], sort=True)):
        fig.add_trace(go.Scatter(
            x=part['eps'], y=part['estimate'], name=f'X={xid} r={r:g}', mode='lines+markers',
            line=dict(width=1.5, color=COLORS[i % len(COLORS)]),
            error_y=dict(type='data', array=2.0 * part['stderr'], visible=True, thickness=1)))
    fig.update_layout(title='Slab ladders', xaxis_title='eps', yaxis_title='slab estimate',
                      xaxis_type='log', **LAYOUT)
    return fig


def ibp_figure(ibp):
    """Extrapolated IBP differences in units of their SE."""
    cells = ibp[ibp['eps'] == 'extrap'].copy()
    cells['cell'] = cells['X'] + ' | ' + cells['h'] + ' | r=' + cells['r'].map('{:g}'.format)
    fig = go.Figure(go.Bar(
        x=cells['cell'], y=cells['diff'] / cells['stderr'].where(cells['stderr'] > 0),
        marker_color=[COLORS[2] if ok else COLORS[1] for ok in cells['passed']],
        hovertemplate='%{x}<br>z=%{y:.2f}<extra></extra>'))
    fig.update_layout(title='Integration by parts: (lhs + rhs) / SE', yaxis_title='z',
                      height=420, xaxis_tickangle=-45)
    return fig


def sde_figure(densities):
    """phi1 against the KDE of g(u), per potential."""
    fig = go.Figure()
    frame = densities.assign(label=densities['potential'] + ' ' + densities['method'])
    _curve_traces(fig, frame, 'label')
    fig.update_layout(title='Density of g(u) under the gradient SDE', xaxis_title='r',
                      yaxis_title='phi1(r)', **LAYOUT)
    return fig


FIGURES = [
    ('density_curves', density_figure),
    ('slab_ladders', ladder_figure),
    ('ibp', ibp_figure),
    ('sde_densities', sde_figure),
]


def build_charts(tables):
    """HTML fragments for every figure whose table is present."""
    charts = []
    for name, build in FIGURES:
        frame = tables.get(name)
        if frame is None or frame.empty:
            continue
        fig = build(frame)
        charts.append({'name': name, 'html': fig.to_html(full_html=False,
                                                         include_plotlyjs=not charts)})
    return charts


def render_report(tables, summary, out_dir):
    """Render the report into out_dir; returns the file path."""
    print("[INFO] Generating HTML report...")
    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), autoescape=True)
    template = env.get_template(REPORT_NAME)

    checks = tables.get('checks')
    failed = [] if checks is None else checks[~checks['passed']].to_dict('records')
    html_content = template.render(
        summary=summary, charts=build_charts(tables), failed=failed,
        config=summary.get('config', {}),
        generated_at=datetime.now().strftime('%Y-%m-%d %H:%M:%S'))

    output_file = Path(out_dir) / REPORT_NAME
    output_file.parent.mkdir(parents=True, exist_ok=True)
    with open(output_file, 'w', encoding='utf-8') as f:
        f.write(html_content)

    print(f"[OK] Report saved to: {output_file}")
    return output_file


def load_results(results_dir):
    """CSV tables and summary.json of a finished run."""
    results_dir = Path(results_dir)
    summary_file = results_dir / 'summary.json'
    if not summary_file.exists():
        raise FileNotFoundError(f"No summary.json in {results_dir}")
    with open(summary_file, 'r', encoding='utf-8') as f:
        summary = json.load(f)
    tables = {file.stem: pd.read_csv(file, comment='#') for file in sorted(results_dir.glob('*.csv'))}
    return tables, summary


def main():
    parser = argparse.ArgumentParser(description='Render the Wiener lab HTML report')
    parser.add_argument('--results', default=str(PROJECT_DIR / 'results'),
                        help='run directory holding summary.json and the CSV tables')
    args = parser.parse_args()

    print("=" * 60)
    print("WIENER LAB REPORT GENERATOR")
    print("=" * 60)

    try:
        tables, summary = load_results(args.results)
    except FileNotFoundError as e:
        print(f"[ERROR] {e}")
        return 1

    print(f"[INFO] Loaded {len(tables)} tables, {summary['passed']}/{summary['checks']} checks passed")
    output_file = render_report(tables, summary, args.results)
    print(f"\nTo view: open {output_file}")
    return 0


if __name__ == '__main__':
    sys.exit(main())
