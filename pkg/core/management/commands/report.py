"""
Management command to aggregate metric reports per method
"""

import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import DenoisingError
from core.metrics import MetricsReport
from core.utils import atomic_write_bytes, write_json

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Per-method mean ± std of every metric over one or more report CSVs"

    def add_arguments(self, parser):
        parser.add_argument("reports", nargs="+", type=str, help="report CSV files")
        parser.add_argument(
            "--output",
            type=str,
            default="summary.csv",
            help="Summary CSV to write (default: summary.csv)",
        )

    def handle(self, *args, **options):
        output = Path(options["output"])
        try:
            combined = MetricsReport()
            for path in options["reports"]:
                if not Path(path).is_file():
                    raise CommandError(f"❌ Report not found: {path}")
                for row in MetricsReport.from_csv(path).rows:
                    combined.add(row)
            summary = combined.aggregate()
        except DenoisingError as exc:
            logger.error(f"report failed: {exc}")
            raise CommandError(f"❌ {exc}") from exc

        text = summary.to_csv(index=False, float_format="%.6f", lineterminator="\n")
        atomic_write_bytes(output, text.encode("utf-8"))
        write_json(output.with_name(f"{output.stem}_config.json"), {
            "command": "report",
            "version": settings.ASLDN_VERSION,
            "reports": [str(p) for p in options["reports"]],
            "output": str(output),
        })

        self.stdout.write(self.style.SUCCESS(f"📊 Summary over {len(combined)} rows"))
        self.stdout.write(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        self.stdout.write(self.style.SUCCESS(f"✅ Summary saved to {output}"))
