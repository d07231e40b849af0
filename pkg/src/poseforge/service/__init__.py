from .app import ReviewState, create_app
from .report import compute_crosscheck
from .store import CorrectionRecord, CorrectionStore

__all__ = ["ReviewState", "create_app", "compute_crosscheck",
           "CorrectionRecord", "CorrectionStore"]
