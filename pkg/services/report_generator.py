import csv
import json
import logging
from io import StringIO
from pathlib import Path

from fpdf import FPDF

from services.domain_models import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS

logger = logging.getLogger(__name__)


class PDF(FPDF):
    def header(self):
        self.set_font('Arial', 'B', 12)
        self.cell(0, 10, 'PRL-Track One-Pass Evaluation Report', 0, 1, 'C')

    def footer(self):
        self.set_y(-15)
        self.set_font('Arial', 'I', 8)
        self.cell(0, 10, f'Page {self.page_no()}', 0, 0, 'C')


def generate_pdf(report):
    """
    Generates a text-only PDF summary from a report dictionary.

    Args:
        report: BenchmarkReport.to_dict() output.

    Returns:
        The raw PDF data as bytes.
    """
    pdf = PDF()
    pdf.add_page()

    pdf.set_font('Arial', 'B', 14)
    pdf.cell(0, 10, 'Aggregate', 0, 1)
    pdf.set_font('Arial', '', 12)
    aggregate = report.get('aggregate')
    if aggregate:
        pdf.cell(0, 10, f"Sequences evaluated: {report.get('evaluated_sequences', 0)}", 0, 1)
        pdf.cell(0, 10, f"Precision@20: {aggregate['precision_at_20']:.3f}", 0, 1)
        pdf.cell(0, 10, f"Success AUC: {aggregate['auc']:.3f}", 0, 1)
    else:
        pdf.cell(0, 10, 'No sequence could be evaluated.', 0, 1)
    pdf.ln(5)

    attributes = report.get('attributes', {})
    if attributes:
        pdf.set_font('Arial', 'B', 14)
        pdf.cell(0, 10, 'Attributes', 0, 1)
        pdf.set_font('Arial', '', 12)
        for tag, result in attributes.items():
            pdf.cell(0, 8, f"  {tag}: precision@20 {result['precision_at_20']:.3f}, AUC {result['auc']:.3f}", 0, 1)
        pdf.ln(5)

    pdf.set_font('Arial', 'B', 14)
    pdf.cell(0, 10, 'Sequences', 0, 1)
    for name, result in report.get('sequences', {}).items():
        pdf.set_font('Arial', 'B', 12)
        pdf.cell(0, 8, name, 0, 1)
        pdf.set_font('Arial', '', 11)
        pdf.cell(0, 8, f"  Precision@20: {result['precision_at_20']:.3f}   AUC: {result['auc']:.3f}", 0, 1)
        over = result.get('frames_over_20px', [])
        if over:
            listed = ', '.join(str(i) for i in over[:30]) + (' ...' if len(over) > 30 else '')
            pdf.multi_cell(0, 8, f'  Frames over 20 px: {listed}')
        pdf.ln(2)

    warnings = report.get('warnings', [])
    if warnings:
        pdf.set_font('Arial', 'B', 14)
        pdf.cell(0, 10, 'Warnings', 0, 1)
        pdf.set_font('Arial', '', 10)
        for warning in warnings:
            pdf.multi_cell(0, 6, warning)

    return bytes(pdf.output())


def generate_csv(thresholds, values):
    """
    Generates a two-column curve CSV (threshold,value).
    """
    output = StringIO()
    writer = csv.writer(output, lineterminator='\n')
    writer.writerow(['threshold', 'value'])
    for threshold, value in zip(thresholds, values):
        writer.writerow([threshold, value])
    return output.getvalue()


def generate_markdown(report):
    """
    Generates a Markdown summary from a report dictionary.
    """
    aggregate = report.get('aggregate')
    md = '# One-Pass Evaluation Results\n\n'
    if aggregate:
        md += f"**Aggregate** over {report.get('evaluated_sequences', 0)} sequences: "
        md += f"precision@20 = {aggregate['precision_at_20']:.3f}, AUC = {aggregate['auc']:.3f}\n\n"

    md += '| Sequence | Precision@20 | AUC | Frames over 20 px |\n'
    md += '|----------|--------------|-----|-------------------|\n'
    for name, result in report.get('sequences', {}).items():
        md += f"| {name} | {result['precision_at_20']:.3f} | {result['auc']:.3f} | " \
              f"{len(result.get('frames_over_20px', []))} |\n"

    attributes = report.get('attributes', {})
    if attributes:
        md += '\n| Attribute | Precision@20 | AUC |\n'
        md += '|-----------|--------------|-----|\n'
        for tag, result in attributes.items():
            md += f"| {tag} | {result['precision_at_20']:.3f} | {result['auc']:.3f} |\n"

    for warning in report.get('warnings', []):
        md += f'\n> warning: {warning}\n'
    return md


def generate_ablation_markdown(rows):
    """
    Generates the variant comparison table.

    Args:
        rows: list of {'variant', 'precision_at_20', 'auc'} dictionaries.
    """
    md = '# Ablation\n\n'
    md += '| Variant | Precision@20 | AUC |\n'
    md += '|---------|--------------|-----|\n'
    for row in rows:
        md += f"| {row['variant']} | {row['precision_at_20']:.3f} | {row['auc']:.3f} |\n"
    return md


def _write_curves(directory, name, result):
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, thresholds, key in (('precision', PRECISION_THRESHOLDS, 'precision_curve'),
                                  ('success', SUCCESS_THRESHOLDS, 'success_curve')):
        path = directory / f'{name}_{kind}.csv'
        path.write_text(generate_csv(thresholds, result[key]), encoding='utf-8')
        written.append(path)
    return written


def write_report(report, out_dir, markdown=False, pdf=False):
    """
    Writes report.json and the curve CSVs; optionally report.md and report.pdf.

    Curve files: overall_{precision,success}.csv at the top level,
    sequences/<name>_*.csv and attributes/<tag>_*.csv below it.

    Returns:
        List of written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    written = [out_dir / 'report.json']
    written[0].write_text(json.dumps(data, indent=2), encoding='utf-8')

    if data['aggregate']:
        written.extend(_write_curves(out_dir, 'overall', data['aggregate']))
    for name, result in data['sequences'].items():
        written.extend(_write_curves(out_dir / 'sequences', name, result))
    for tag, result in data['attributes'].items():
        written.extend(_write_curves(out_dir / 'attributes', tag, result))

    if markdown:
        written.append(out_dir / 'report.md')
        written[-1].write_text(generate_markdown(data), encoding='utf-8')
    if pdf:
        written.append(out_dir / 'report.pdf')
        written[-1].write_bytes(generate_pdf(data))
    logger.info(f'Wrote {len(written)} report files to {out_dir}')
    return written
