"""Sequence dataset of (inputs, rate targets) and its CSV format."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CSV_COLUMNS = ("seq_id", "t_s", "n_em_rpm", "t_em_nm", "theta_w_c", "theta_r_c",
               "dtheta_w_cps", "dtheta_r_cps")


@dataclass
class Sequence:
    inputs: np.ndarray       # (T, 4): n_em, t_em, theta_w, theta_r
    targets: np.ndarray      # (T, 2): dtheta_w, dtheta_r
    t: np.ndarray            # (T,)
    seq_id: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[1] != 4:
            raise ValueError("inputs must have shape (T, 4)")
        if self.targets.shape != (len(self.inputs), 2):
            raise ValueError("targets must have shape (T, 2) matching inputs")
        if self.t.shape != (len(self.inputs),):
            raise ValueError("time stamps must match inputs")

    def __len__(self):
        return len(self.inputs)

    def decimate(self, stride: int) -> "Sequence":
        """Resample to every ``stride``-th step.

        Temperatures are taken at the block start, speed and torque are block
        means and the targets are block-mean rates, so an explicit Euler step
        of ``stride * dt`` over the decimated record reproduces the temperature
        at the next block start exactly.
        """
        if stride == 1:
            return self
        nblk = len(self) // stride
        if nblk == 0:
            raise ValueError("sequence shorter than decimation stride")
        cut = nblk * stride
        blocks_in = self.inputs[:cut].reshape(nblk, stride, 4)
        inputs = blocks_in[:, 0, :].copy()
        inputs[:, :2] = blocks_in[:, :, :2].mean(axis=1)
        targets = self.targets[:cut].reshape(nblk, stride, 2).mean(axis=1)
        return Sequence(inputs, targets, self.t[:cut:stride], self.seq_id)


@dataclass
class Dataset:
    sequences: list = field(default_factory=list)
    split: str = "all"

    def __len__(self):
        return len(self.sequences)

    @property
    def n_records(self) -> int:
        return sum(len(s) for s in self.sequences)

    def decimate(self, stride: int) -> "Dataset":
        return Dataset([s.decimate(stride) for s in self.sequences], self.split)

    def stacked(self):
        """All records concatenated: (inputs, targets)."""
        return (np.concatenate([s.inputs for s in self.sequences]),
                np.concatenate([s.targets for s in self.sequences]))

    def padded(self, start: int = 0, stop: int | None = None):
        """Post-padded arrays (x, y, mask, lengths) for sequences[start:stop]."""
        seqs = self.sequences[start:stop]
        lengths = np.array([len(s) for s in seqs])
        nt = int(lengths.max())
        x = np.zeros((len(seqs), nt, 4))
        y = np.zeros((len(seqs), nt, 2))
        mask = np.zeros((len(seqs), nt))
        for b, s in enumerate(seqs):
            x[b, :len(s)] = s.inputs
            y[b, :len(s)] = s.targets
            mask[b, :len(s)] = 1.0
        return x, y, mask, lengths

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s in self.sequences:
                for k in range(len(s)):
                    w.writerow([s.seq_id, repr(float(s.t[k]))]
                               + [repr(float(v)) for v in s.inputs[k]]
                               + [repr(float(v)) for v in s.targets[k]])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        with open(path) as fh:
            header = tuple(next(csv.reader(fh)))
        if header != CSV_COLUMNS:
            raise ValueError(f"unexpected dataset columns {header}")
        seqs = []
        ids = data[:, 0].astype(int)
        # keep first-appearance order of sequence ids
        _, first = np.unique(ids, return_index=True)
        for sid in ids[np.sort(first)]:
            rows = data[ids == sid]
            seqs.append(Sequence(rows[:, 2:6], rows[:, 6:8], rows[:, 1], int(sid)))
        return cls(seqs)
