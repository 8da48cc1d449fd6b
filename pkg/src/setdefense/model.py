"""Bundle of a network architecture and trained parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import checkpoint
from .network import ModelParameters, Network


@dataclass
class Model:
    network: Network
    params: ModelParameters
    tag: str = "model"
    _fingerprint: Optional[str] = None

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = checkpoint.fingerprint(self.network, self.params)
        return self._fingerprint

    def save(self, path) -> str:
        return checkpoint.save(path, self.network, self.params)

    @staticmethod
    def load(path, tag: str = "model") -> "Model":
        network, params = checkpoint.load(path)
        return Model(network, params, tag)
