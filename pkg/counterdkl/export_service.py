"""
Export service for benchmark results
Writes results.csv, aggregates.csv, timings.csv, the run manifest and an optional Excel workbook
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import pandas as pd
from loguru import logger
from openpyxl import load_workbook
from openpyxl.styles import Alignment, Font, PatternFill

from counterdkl.config import settings
from counterdkl.schemas import ResultRow

RESULT_COLUMNS = ["axis", "axis_value", "dgp", "variant", "task", "outcome", "replication", "seed", "value", "failed", "error"]
TIMING_COLUMNS = ["axis", "axis_value", "dgp", "variant", "replication", "seed", "seconds"]


class ResultExportService:
    """Service writing experiment outputs to a directory"""

    def __init__(self, output_dir: Optional[Union[str, Path]] = None):
        """Default directory comes from settings.output_dir"""
        self.output_dir = Path(output_dir) if output_dir is not None else settings.output_path

    def _target(self, out_dir: Optional[Union[str, Path]], filename: str) -> Path:
        directory = Path(out_dir) if out_dir is not None else self.output_dir
        directory.mkdir(parents=True, exist_ok=True)
        return directory / filename

    def _write_csv(self, frame: pd.DataFrame, path: Path) -> Path:
        frame.to_csv(path, index=False, float_format=settings.csv_float_format, encoding="utf-8", lineterminator="\n")
        return path

    def export_results(self, rows: List[ResultRow], out_dir: Optional[Union[str, Path]] = None) -> Path:
        """
        Write the raw result rows (wall-clock excluded so reruns are byte-identical)

        Args:
            rows: Result rows, already in their deterministic order
            out_dir: Target directory

        Returns:
            Path of results.csv
        """
        try:
            frame = pd.DataFrame([r.model_dump() for r in rows], columns=RESULT_COLUMNS + ["seconds"])
            path = self._write_csv(frame[RESULT_COLUMNS], self._target(out_dir, "results.csv"))
            logger.info(f"✅ Exported {len(rows)} result rows: {path}")
            return path
        except Exception as e:
            logger.error(f"❌ Failed to export results: {str(e)}")
            raise

    def export_timings(self, rows: List[ResultRow], out_dir: Optional[Union[str, Path]] = None) -> Path:
        """One line per fit with its wall-clock seconds"""
        frame = pd.DataFrame([r.model_dump() for r in rows], columns=RESULT_COLUMNS + ["seconds"])
        frame = frame[TIMING_COLUMNS].drop_duplicates(subset=TIMING_COLUMNS[:-1], keep="first")
        path = self._write_csv(frame, self._target(out_dir, "timings.csv"))
        logger.debug(f"Exported {len(frame)} timings: {path}")
        return path

    def export_aggregates(self, aggregates: pd.DataFrame, out_dir: Optional[Union[str, Path]] = None) -> Path:
        path = self._write_csv(aggregates, self._target(out_dir, "aggregates.csv"))
        logger.info(f"✅ Exported {len(aggregates)} aggregate cells: {path}")
        return path

    def export_manifest(self, manifest: Dict[str, Any], out_dir: Optional[Union[str, Path]] = None) -> Path:
        """Write the run manifest (config echo, version, seeds, protocol decisions) as JSON"""
        try:
            path = self._target(out_dir, "manifest.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump(manifest, f, ensure_ascii=False, indent=2, sort_keys=True)
            logger.info(f"✅ Exported manifest: {path}")
            return path
        except Exception as e:
            logger.error(f"❌ Failed to export manifest: {str(e)}")
            raise

    def export_excel(
        self,
        aggregates: pd.DataFrame,
        rows: List[ResultRow],
        out_dir: Optional[Union[str, Path]] = None,
    ) -> Path:
        """
        Formatted workbook with the aggregates and the raw rows

        Args:
            aggregates: Aggregate table
            rows: Raw result rows
            out_dir: Target directory

        Returns:
            Path of aggregates.xlsx
        """
        try:
            path = self._target(out_dir, "aggregates.xlsx")
            raw = pd.DataFrame([r.model_dump() for r in rows], columns=RESULT_COLUMNS + ["seconds"])
            with pd.ExcelWriter(path, engine="openpyxl") as writer:
                aggregates.to_excel(writer, sheet_name="Aggregates", index=False)
                raw.to_excel(writer, sheet_name="Results", index=False)
            self._format_excel_file(path)
            logger.info(f"✅ Exported Excel: {path}")
            return path
        except Exception as e:
            logger.error(f"❌ Failed to export Excel: {str(e)}")
            raise

    def _format_excel_file(self, file_path: Path):
        """
        Header styling and column widths

        Args:
            file_path: Workbook to format in place
        """
        try:
            wb = load_workbook(file_path)

            header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
            header_font = Font(bold=True, color="FFFFFF")
            center_alignment = Alignment(horizontal="center", vertical="center")

            for sheet_name in wb.sheetnames:
                ws = wb[sheet_name]

                for cell in ws[1]:
                    cell.fill = header_fill
                    cell.font = header_font
                    cell.alignment = center_alignment

                # Auto-adjust column width
                for column in ws.columns:
                    max_length = max(len(str(cell.value)) if cell.value is not None else 0 for cell in column)
                    ws.column_dimensions[column[0].column_letter].width = min(max_length + 2, 50)

                ws.freeze_panes = "A2"

            wb.save(file_path)
            logger.debug(f"✅ Formatted Excel file: {file_path}")

        except Exception as e:
            logger.warning(f"⚠️ Could not format Excel: {str(e)}")


# Singleton instance
result_export_service = ResultExportService()
