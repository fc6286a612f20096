"""
Adam over named parameter classes, each with its own learning rate per step.
"""

from typing import Dict, Mapping

import numpy as np


class AdamOptimizer:
    """Dense Adam with bias correction; moments are keyed by parameter class"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(
        self,
        params: Mapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lrs: Mapping[str, float],
    ) -> None:
        """Update every array in `params` in place"""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t

        for name, param in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(param)
                self.v[name] = np.zeros_like(param)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)

            lr = lrs[name]
            if lr == 0.0:
                continue
            param -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers flattened into one name -> array mapping"""
        arrays = {}
        for name in sorted(self.m):
            arrays[f"adam.m.{name}"] = self.m[name]
            arrays[f"adam.v.{name}"] = self.v[name]
        return arrays

    def load_state(self, t: int, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m, self.v = {}, {}
        for key, value in arrays.items():
            _, kind, name = key.split(".", 2)
            target = self.m if kind == "m" else self.v
            target[name] = np.array(value, dtype=np.float64)
