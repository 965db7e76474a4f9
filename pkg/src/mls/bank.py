"""Two FIFO dictionaries kept in identical slot order.

``Qg`` stores normalized momentum backbone features (used for pseudo
labels), ``Qz`` normalized momentum projector features (used as
classifiers and as InfoNCE negatives). Slot ``i`` of both, and of the
metadata arrays, always comes from the same enqueued item.

Slots fill in order ``0, 1, ...`` until the first wrap, so the valid rows
before the bank is full are exactly ``[0, filled)``. InfoNCE uses those
valid rows as negatives; the scoring ops that drive pseudo-labeling refuse
to run until every slot holds a real item.
"""
import numpy as np

from .numkit import ShapeError, l2_normalize_rows


class BankNotReadyError(RuntimeError):
    pass


class DictBank:
    def __init__(self, capacity, d_g, d_z, dtype=np.float64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.Qg = np.zeros((capacity, d_g), dtype=dtype)
        self.Qz = np.zeros((capacity, d_z), dtype=dtype)
        self.head = 0
        self.filled = 0
        # per-slot provenance; -1 marks a never-written slot
        self.meta_source = np.full(capacity, -1, dtype=np.int64)
        self.meta_box = np.zeros((capacity, 4), dtype=np.int64)
        self.meta_epoch = np.full(capacity, -1, dtype=np.int64)

    @property
    def is_full(self):
        return self.filled == self.capacity

    def enqueue(self, g2, z2, sources, boxes, epoch):
        """Normalize and write a batch circularly, oldest slots first."""
        b = g2.shape[0]
        if z2.shape[0] != b or len(sources) != b or len(boxes) != b:
            raise ShapeError("g2, z2 and metadata must be row-aligned")
        if b > self.capacity:
            raise ShapeError(f"batch of {b} exceeds capacity {self.capacity}")
        if g2.shape[1] != self.Qg.shape[1] or z2.shape[1] != self.Qz.shape[1]:
            raise ShapeError("embedding width does not match the bank")
        gn = l2_normalize_rows(g2)  # raises before any slot is touched
        zn = l2_normalize_rows(z2)
        slots = (self.head + np.arange(b)) % self.capacity
        self.Qg[slots] = gn
        self.Qz[slots] = zn
        self.meta_source[slots] = np.asarray(sources, dtype=np.int64)
        self.meta_box[slots] = np.asarray(boxes, dtype=np.int64).reshape(b, 4)
        self.meta_epoch[slots] = epoch
        self.head = int((self.head + b) % self.capacity)
        self.filled = min(self.filled + b, self.capacity)
        return slots

    def negatives(self):
        """Valid ``Qz`` rows (all of them once full)."""
        return self.Qz if self.is_full else self.Qz[:self.filled]

    def _require_full(self):
        if not self.is_full:
            raise BankNotReadyError(f"bank holds {self.filled}/{self.capacity} items")

    def scores_backbone(self, g1n):
        """Cosine scores of normalized ``g1`` rows against every ``Qg`` slot."""
        self._require_full()
        return g1n @ self.Qg.T

    def scores_projector(self, z1n):
        """Logits ``p = z1 Qz^T``; the gradient w.r.t. ``z1`` is ``dp @ Qz``."""
        self._require_full()
        return z1n @ self.Qz.T

    def check_unit_norm(self, tol=1e-5):
        for q in (self.Qg, self.Qz):
            n = np.linalg.norm(q[:self.filled].astype(np.float64), axis=1)
            if n.size == 0:
                continue
            if np.abs(n - 1.0).max() > tol:
                raise AssertionError("bank row norm drifted from 1")

    def meta_records(self):
        """Valid slots as JSON-ready dicts, in slot order."""
        out = []
        for i in range(self.capacity):
            if self.meta_source[i] < 0:
                continue
            out.append({"slot": i, "source_index": int(self.meta_source[i]),
                        "crop_box": [int(v) for v in self.meta_box[i]],
                        "epoch": int(self.meta_epoch[i])})
        return out

    def state_dict(self):
        return {"bank.Qg": self.Qg, "bank.Qz": self.Qz,
                "bank.meta_source": self.meta_source, "bank.meta_box": self.meta_box,
                "bank.meta_epoch": self.meta_epoch,
                "bank.cursor": np.array([self.head, self.filled], dtype=np.int64)}

    @classmethod
    def from_state(cls, state):
        qg, qz = state["bank.Qg"], state["bank.Qz"]
        bank = cls.__new__(cls)
        bank.capacity = qg.shape[0]
        bank.Qg, bank.Qz = qg.copy(), qz.copy()
        bank.meta_source = state["bank.meta_source"].copy()
        bank.meta_box = state["bank.meta_box"].copy()
        bank.meta_epoch = state["bank.meta_epoch"].copy()
        bank.head, bank.filled = (int(v) for v in state["bank.cursor"])
        return bank
