from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class StateVector:
    """
    Horizontal UAV positions x[0..N-1] followed by user positions u[0..K-1].
    Packed as [x0, y0, x1, y1, ..., ux0, uy0, ...]; node i owns entries 2i and 2i+1.
    """
    uav: np.ndarray
    users: np.ndarray

    def __post_init__(self):
        self.uav = np.asarray(self.uav, dtype=float).reshape(-1, 2)
        self.users = np.asarray(self.users, dtype=float).reshape(-1, 2)
        if not (np.all(np.isfinite(self.uav)) and np.all(np.isfinite(self.users))):
            raise ValueError("State positions must be finite")

    @property
    def n_uav(self):
        return len(self.uav)

    @property
    def n_users(self):
        return len(self.users)

    @property
    def dim(self):
        return 2 * (self.n_uav + self.n_users)

    def nodes(self):
        return np.vstack([self.uav, self.users])

    def pack(self):
        return self.nodes().ravel()

    @classmethod
    def from_packed(cls, packed, n_uav, n_users):
        nodes = np.asarray(packed, dtype=float).reshape(n_uav + n_users, 2)
        return cls(uav=nodes[:n_uav], users=nodes[n_uav:])

    def copy(self):
        return StateVector(uav=self.uav.copy(), users=self.users.copy())

    def translated(self, offset):
        offset = np.asarray(offset, dtype=float)[:2]
        return StateVector(uav=self.uav + offset, users=self.users + offset)

    def max_change(self, other):
        """Largest horizontal displacement of any node between two states."""
        if self.dim == 0:
            return 0.0
        return float(np.max(np.linalg.norm(self.nodes() - other.nodes(), axis=1)))
