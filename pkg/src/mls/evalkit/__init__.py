"""Representation-quality measurements and diagnostic dumps."""
from .ablation import AXES, parse_axes, run_ablation_grid
from .histograms import dump_score_histograms, score_histogram
from .metrics import average_precision, chance_overlap, ks_statistic, overlap_precision, topk_neighbors
from .neighbors import MetaMissingError, dump_neighbors
from .probe import ProbeReport, eval_linear_probe, linear_probe
from .retrieval import RetrievalReport, eval_retrieval, retrieval_report

__all__ = [
    "AXES", "MetaMissingError", "ProbeReport", "RetrievalReport", "average_precision",
    "chance_overlap", "dump_neighbors", "dump_score_histograms", "eval_linear_probe",
    "eval_retrieval", "ks_statistic", "linear_probe", "overlap_precision", "parse_axes",
    "retrieval_report", "run_ablation_grid", "score_histogram", "topk_neighbors",
]
