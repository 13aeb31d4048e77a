"""Robust functional principal components for complete and incomplete longitudinal data."""

from robfpca.data import DataFormatError, LongitudinalDataset, decimate, load_csv, write_csv
from robfpca.mm import MmConfig, fit_mm, final_adjustment
from robfpca.model import FpcaModel, explained_proportion, load_model, save_model
from robfpca.naive import fit_classical, fit_naive

__all__ = [
    "DataFormatError", "LongitudinalDataset", "decimate", "load_csv", "write_csv",
    "MmConfig", "fit_mm", "final_adjustment",
    "FpcaModel", "explained_proportion", "load_model", "save_model",
    "fit_classical", "fit_naive",
]
