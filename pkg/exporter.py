"""
Export Module for the clustered NOMA federated learning simulator

Writes run artifacts: per-round metrics, matchings, concentration estimates,
cluster labels, label histograms, Laplacian spectra, channel gains, oracle
reports, the JSON run summary and binary model checkpoints.
"""

import csv
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from dirichlet_data import EstimationResult, LabelHistogram
from fl_core import ModelParams
from utils import get_file_hash, write_json_file


class ExportError(Exception):
    """Exception raised when export operations fail."""
    pass


class ValidationError(ExportError):
    """Exception raised when an exported file fails validation."""
    pass


METRICS_COLUMNS = ['round', 'cluster_id', 'global_loss', 'optimality_gap', 'test_accuracy', 'test_accuracy_smoothed',
                   'selected', 'participants', 'infeasible', 'energy_joules', 'transmit_energy_joules', 'bound_rhs']
MATCHING_COLUMNS = ['round', 'cluster_id', 'subchannel', 'first_user', 'second_user', 'p11', 'p12', 'p2',
                    'kkt_case', 'feasible', 'energy_joules', 'reason']
ORACLE_COLUMNS = ['instance', 'kkt_energy', 'oracle_energy', 'relative_gap', 'kkt_case', 'audit_ok']

CHECKPOINT_MAGIC = b'CFLCKPT1'
_CHECKPOINT_HEADER = struct.Struct('<8sQqq')


def _format(value: Any) -> Any:
    # repr keeps full float precision so reruns are byte-identical
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (bool, np.bool_)):
        return int(bool(value))
    return value


class ResultExporter:
    """
    Handles export of simulation results to CSV, JSON and binary files.
    """

    def __init__(self, output_dir: Optional[Path] = None):
        """
        Initialize the ResultExporter.

        Args:
            output_dir: Directory for output files (defaults to config setting)
        """
        self.output_dir = Path(output_dir or Config.DEFAULT_OUTPUT_DIR)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logging.debug(f"ResultExporter writing to {self.output_dir}")

    def _write_csv(self, filename: str, columns: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
        output_path = self.output_dir / filename
        try:
            with open(output_path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction='ignore', lineterminator='\n')
                writer.writeheader()
                count = 0
                for row in rows:
                    writer.writerow({key: _format(row.get(key, '')) for key in columns})
                    count += 1
        except (OSError, ValueError) as e:
            raise ExportError(f"Writing {output_path} failed: {str(e)}")
        logging.info(f"Exported {count} rows to {output_path}")
        return output_path

    def export_metrics(self, rows: Sequence[Dict[str, Any]], filename: str = Config.METRICS_FILE) -> Path:
        """
        Write the per-round, per-cluster metrics table.

        Raises:
            ExportError: If a row holds a non-finite number or the write fails
        """
        for row in rows:
            for key in METRICS_COLUMNS:
                value = row.get(key)
                if isinstance(value, (float, np.floating)) and not np.isfinite(value):
                    raise ExportError(f"Metrics row (round {row.get('round')}, cluster {row.get('cluster_id')}) "
                                      f"has non-finite {key}")
        return self._write_csv(filename, METRICS_COLUMNS, rows)

    def export_matching(self, rows: Sequence[Dict[str, Any]], filename: str = Config.MATCHING_FILE) -> Path:
        return self._write_csv(filename, MATCHING_COLUMNS, rows)

    def export_alphas(self, results: Sequence[EstimationResult], filename: str = Config.ALPHAS_FILE) -> Path:
        """One row per user: alpha_1..alpha_C, converged as 0/1 and the BFGS iteration count."""
        if not results:
            raise ExportError("No concentration estimates to export")
        num_classes = results[0].alpha.alpha.size
        alpha_columns = [f'alpha_{c}' for c in range(1, num_classes + 1)]
        columns = ['user_id'] + alpha_columns + ['converged', 'iterations']
        rows = []
        for user_id, result in enumerate(results):
            row = {'user_id': user_id, 'converged': int(result.converged), 'iterations': int(result.iterations)}
            row.update(zip(alpha_columns, (float(a) for a in result.alpha.alpha)))
            rows.append(row)
        return self._write_csv(filename, columns, rows)

    def export_clusters(self, labels: Sequence[int], group_ids: Optional[Sequence[int]] = None,
                        filename: str = Config.CLUSTERS_FILE) -> Path:
        columns = ['user_id', 'cluster_id'] + (['group_id'] if group_ids is not None else [])
        rows = []
        for user_id, label in enumerate(labels):
            row = {'user_id': user_id, 'cluster_id': int(label)}
            if group_ids is not None:
                row['group_id'] = int(group_ids[user_id])
            rows.append(row)
        return self._write_csv(filename, columns, rows)

    def export_histograms(self, histograms: Sequence[LabelHistogram],
                          filename: str = Config.HISTOGRAMS_FILE) -> Path:
        if not histograms:
            raise ExportError("No histograms to export")
        num_classes = histograms[0].num_classes
        columns = ['user_id'] + [f'class_{c}' for c in range(num_classes)]
        rows = []
        for user_id, hist in enumerate(histograms):
            row = {'user_id': user_id}
            row.update({f'class_{c}': int(v) for c, v in enumerate(hist.counts)})
            rows.append(row)
        return self._write_csv(filename, columns, rows)

    def import_histograms(self, path: Path) -> List[LabelHistogram]:
        """
        Read a histogram CSV written by export_histograms.

        Raises:
            ExportError: If the file is missing or malformed
        """
        path = Path(path)
        try:
            with open(path, 'r', newline='', encoding='utf-8') as f:
                reader = csv.DictReader(f)
                class_columns = [c for c in (reader.fieldnames or []) if c.startswith('class_')]
                if not class_columns:
                    raise ValueError("no class_<c> columns")
                return [LabelHistogram.from_counts([int(row[c]) for c in class_columns]) for row in reader]
        except (OSError, ValueError, KeyError) as e:
            raise ExportError(f"Reading histograms from {path} failed: {str(e)}")

    def export_spectrum(self, eigenvalues: Sequence[float], filename: str = Config.SPECTRUM_FILE) -> Path:
        eigenvalues = np.asarray(eigenvalues, dtype=float)
        gaps = np.append(np.diff(eigenvalues), np.nan)
        rows = [{'index': i + 1, 'eigenvalue': float(v), 'gap_to_next': '' if np.isnan(g) else float(g)}
                for i, (v, g) in enumerate(zip(eigenvalues, gaps))]
        return self._write_csv(filename, ['index', 'eigenvalue', 'gap_to_next'], rows)

    def export_channels(self, rows: Sequence[Dict[str, Any]], num_subchannels: int,
                        filename: str = Config.CHANNELS_FILE) -> Path:
        """Rows carry round, user_id and a 'gains' vector over the sub-channels."""
        columns = ['round', 'user_id'] + [f'gain_{k}' for k in range(num_subchannels)]
        flat = []
        for row in rows:
            entry = {'round': row['round'], 'user_id': row['user_id']}
            entry.update({f'gain_{k}': float(g) for k, g in enumerate(row['gains'])})
            flat.append(entry)
        return self._write_csv(filename, columns, flat)

    def export_oracle_report(self, rows: Sequence[Dict[str, Any]], filename: str = 'oracle.csv') -> Path:
        return self._write_csv(filename, ORACLE_COLUMNS, rows)

    def export_table(self, rows: Sequence[Dict[str, Any]], filename: str,
                     columns: Optional[Sequence[str]] = None) -> Path:
        """Generic table writer for benchmark and sweep reports."""
        if columns is None:
            columns = list(rows[0].keys()) if rows else []
        return self._write_csv(filename, columns, rows)

    def export_report(self, summary: Dict[str, Any], filename: str = Config.REPORT_FILE) -> Path:
        """
        Write the JSON run summary, adding the hash of metrics.csv when present.

        Raises:
            ExportError: If the file cannot be written
        """
        summary = dict(summary)
        metrics_path = self.output_dir / Config.METRICS_FILE
        if metrics_path.exists():
            summary['metrics_sha256'] = get_file_hash(metrics_path)
        output_path = self.output_dir / filename
        if not write_json_file(output_path, _json_ready(summary)):
            raise ExportError(f"Writing {output_path} failed")
        logging.info(f"Successfully exported run report to {output_path}")
        return output_path

    def save_checkpoint(self, params: ModelParams, round_index: int, cluster_id: int,
                        filename: Optional[str] = None) -> Path:
        """
        Write a binary checkpoint: 8-byte magic, dimension, round, cluster, then float64 weights.

        Raises:
            ExportError: If the write fails
        """
        filename = filename or f"checkpoint_c{cluster_id}_r{round_index}.bin"
        output_path = self.output_dir / filename
        try:
            with open(output_path, 'wb') as f:
                f.write(_CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, params.dimension, round_index, cluster_id))
                f.write(params.weights.astype('<f8').tobytes())
        except OSError as e:
            raise ExportError(f"Checkpoint export failed: {str(e)}")
        logging.debug(f"Saved checkpoint {output_path}")
        return output_path

    def load_checkpoint(self, path: Path) -> Tuple[ModelParams, int, int]:
        """
        Read a checkpoint written by save_checkpoint.

        Returns:
            (params, round_index, cluster_id)

        Raises:
            ValidationError: On a bad magic, a truncated payload or an unreadable file
        """
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise ValidationError(f"Cannot read checkpoint {path}: {str(e)}")
        if len(data) < _CHECKPOINT_HEADER.size:
            raise ValidationError(f"Checkpoint {path} is truncated")
        magic, dimension, round_index, cluster_id = _CHECKPOINT_HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path} is not a checkpoint file")
        payload = data[_CHECKPOINT_HEADER.size:]
        if len(payload) != 8 * dimension:
            raise ValidationError(f"Checkpoint {path} holds {len(payload)} payload bytes, expected {8 * dimension}")
        weights = np.frombuffer(payload, dtype='<f8').astype(float)
        return ModelParams(weights), int(round_index), int(cluster_id)


def _json_ready(value: Any) -> Any:
    """Convert numpy scalars and arrays for json.dump."""
    if isinstance(value, dict):
        return {str(k): _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_ready(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else None
    return value
