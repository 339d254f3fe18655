"""Nodal field containers tied to a mesh."""

import numpy as np


class NodalScalarField:
    """One finite scalar value per mesh node."""

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_nodes,):
            raise ValueError(
                f"field has {values.shape} values for {mesh.n_nodes} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("non-finite field values")
        self.mesh = mesh
        self.values = values

    def copy(self):
        return NodalScalarField(self.mesh, self.values.copy())


class NodalMetricField:
    """One symmetric positive-definite 3x3 tensor per mesh node."""

    def __init__(self, mesh, tensors, check=True):
        tensors = np.asarray(tensors, dtype=float)
        if tensors.shape != (mesh.n_nodes, 3, 3):
            raise ValueError(
                f"tensor array {tensors.shape} does not match {mesh.n_nodes} nodes"
            )
        if check:
            if not np.allclose(tensors, np.swapaxes(tensors, 1, 2), atol=1e-9):
                raise ValueError("metric tensors not symmetric")
            eig = np.linalg.eigvalsh(tensors)
            if np.min(eig) <= 0.0:
                raise ValueError("metric tensors not positive-definite")
        self.mesh = mesh
        self.tensors = tensors

    def copy(self):
        return NodalMetricField(self.mesh, self.tensors.copy(), check=False)
