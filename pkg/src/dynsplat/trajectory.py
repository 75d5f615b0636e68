"""Trajectory container and TUM-format text I/O.

File lines are "timestamp tx ty tz qx qy qz qw" (camera-to-world), '#'
comments skipped. Writes are canonical (17 significant digits, single
spaces, trailing newline) so write -> read -> write is byte-stable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import SE3Pose, quat_to_rotmat, rotmat_to_quat


class TrajectoryFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """Timestamped camera-to-world poses, timestamps strictly increasing."""

    entries: list = field(default_factory=list)   # (timestamp, SE3Pose)
    # quaternion as read from / written to file, kept verbatim so that
    # read -> write preserves canonical files byte for byte
    _quats: list = field(default_factory=list, repr=False)

    def append(self, timestamp: float, pose: SE3Pose, _quat=None):
        if self.entries and timestamp <= self.entries[-1][0]:
            raise TrajectoryFormatError(
                f"timestamp {timestamp} not increasing (last {self.entries[-1][0]})")
        self.entries.append((float(timestamp), pose))
        self._quats.append(rotmat_to_quat(pose.rotation) if _quat is None
                           else np.asarray(_quat, dtype=np.float64))

    def timestamps(self) -> np.ndarray:
        return np.array([t for t, _ in self.entries])

    def positions(self) -> np.ndarray:
        return np.array([p.translation for _, p in self.entries]).reshape(-1, 3)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_tum(path, traj: Trajectory, header: str | None = None) -> None:
    lines = []
    if header:
        lines.append(f"# {header}")
    for (t, pose), q in zip(traj.entries, traj._quats):
        qw, qx, qy, qz = q
        tx, ty, tz = pose.translation
        lines.append(" ".join(_fmt(v) for v in (t, tx, ty, tz, qx, qy, qz, qw)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> Trajectory:
    traj = Trajectory()
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise TrajectoryFormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        except ValueError as exc:
            raise TrajectoryFormatError(f"{path}:{ln}: {exc}") from None
        norm = (qx * qx + qy * qy + qz * qz + qw * qw) ** 0.5
        if abs(norm - 1.0) > 1e-3:
            raise TrajectoryFormatError(f"{path}:{ln}: quaternion norm {norm:.6f} != 1")
        q = np.array([qw, qx, qy, qz])
        if abs(norm - 1.0) > 1e-9:
            q = q / norm
        try:
            traj.append(t, SE3Pose(quat_to_rotmat(q), np.array([tx, ty, tz])), _quat=q)
        except TrajectoryFormatError:
            raise TrajectoryFormatError(f"{path}:{ln}: non-monotonic timestamp {t}") from None
    return traj
