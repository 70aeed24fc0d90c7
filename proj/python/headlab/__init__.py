"""Attention-head importance, pruning dissociation and task similarity.

Configs may be given as a path to a JSON file or as a dict; relative paths
inside a dict resolve against the current directory. Every run writes its
artifacts under ``out`` and returns the decoded report.
"""

import json
import os
from pathlib import Path

from . import _headlab
from ._headlab import (
    CONFIG_VERSION,
    REPORT_VERSION,
    CheckpointError,
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
)

__all__ = [
    "CONFIG_VERSION",
    "REPORT_VERSION",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ShapeError",
    "ahp",
    "correlate",
    "correlate_values",
    "dissociate_csv",
    "dissociation",
    "load_config",
    "prune_eval",
    "report",
    "selfcheck",
    "similarity",
    "synth_task",
    "train",
    "transfer",
]


def _config(config):
    if isinstance(config, (str, os.PathLike)):
        path = Path(config)
        return path.read_text(), path.resolve().parent
    return json.dumps(config), Path.cwd()


def load_config(config):
    """Validated config with every default filled in."""
    return json.loads(_headlab.normalize_config(*_config(config)))


def train(config, out, resume=None, max_steps=None):
    """Returns (report, params_sha256)."""
    text, base = _config(config)
    report, digest = _headlab.train(text, base, Path(out), resume, max_steps)
    return json.loads(report), digest


def report(config, out):
    return json.loads(_headlab.report(*_config(config), Path(out)))


def prune_eval(config, checkpoint, out, importance_only=False):
    return json.loads(_headlab.prune_eval(*_config(config), Path(checkpoint), Path(out), importance_only))


def transfer(config, out):
    return json.loads(_headlab.transfer(*_config(config), Path(out)))


def dissociation(tasks, base, pruned, alpha=0.3, distinct=10.0, single=10.0, mild=5.0):
    """Dissociation report for a prune table: ``pruned[j][i]`` is task i's
    metric with task j's heads pruned, in the same units as ``base``."""
    return json.loads(_headlab.dissociation(list(tasks), list(base), [list(r) for r in pruned],
                                            alpha, distinct, single, mild))


def dissociate_csv(table, out, alpha=0.3, distinct=10.0, single=10.0, mild=5.0):
    return json.loads(_headlab.dissociate_csv(Path(table), alpha, distinct, single, mild, Path(out)))


def similarity(models, probes, out, metrics=("dse", "cra"), transfer_csv=None, layer=None,
               pooling="mean", statistic="spearman", max_len=32):
    """``models`` maps task name to checkpoint directory; ``probes`` is a list
    of sentences."""
    pairs = [(task, Path(d)) for task, d in dict(models).items()]
    return json.loads(_headlab.similarity(pairs, list(probes), list(metrics),
                                          None if transfer_csv is None else Path(transfer_csv),
                                          layer, pooling, statistic, max_len, Path(out)))


def ahp(tasks, transfer_matrix):
    """AHP similarity from a transfer matrix with rows = source, columns = target."""
    return json.loads(_headlab.ahp(list(tasks), [list(r) for r in transfer_matrix]))


def correlate_values(x, y):
    return json.loads(_headlab.correlate_values(list(x), list(y)))


def correlate(similarity_csv, dissociation_csv, out):
    return json.loads(_headlab.correlate(Path(similarity_csv), Path(dissociation_csv), Path(out)))


def synth_task(kind, size, seed, n_class=4):
    """List of (text_a, text_b or None, label)."""
    return _headlab.synth_task(kind, size, seed, n_class)


def selfcheck(seeds=5):
    """Returns (all_passed, one line per check)."""
    return _headlab.selfcheck(seeds)
