"""
Checkpoint lifecycle: a single archive holding the network config as
canonical JSON, raw and EMA parameter tensors keyed by path, the noise
schedule config, and training provenance. Loading verifies the config
hash recorded at save time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import torch

from landmark_diffusion.network import NetworkConfig


@dataclass
class Checkpoint:
    config: NetworkConfig
    state: Dict[str, torch.Tensor]
    ema_state: Optional[Dict[str, torch.Tensor]] = None
    schedule: Optional[dict] = None  # {"num_steps", "beta_start", "beta_end"}
    metadata: dict = field(default_factory=dict)  # iteration, dataset id, ...

    @property
    def is_detector(self) -> bool:
        return not self.config.timestep_conditioning

    def weights(self, source: str = "ema") -> Dict[str, torch.Tensor]:
        """Pick the EMA or raw weight set; EMA falls back to raw if absent."""
        if source == "ema" and self.ema_state is not None:
            return self.ema_state
        if source not in ("ema", "raw"):
            raise ValueError(f"unknown weight source {source!r}")
        return self.state


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_json = ckpt.config.to_json()
    payload = {
        "config_json": config_json,
        "config_hash": ckpt.config.hash(),
        "state": ckpt.state,
        "ema_state": ckpt.ema_state,
        "schedule": ckpt.schedule,
        "metadata": ckpt.metadata,
    }
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = NetworkConfig.from_json(payload["config_json"])
    if config.hash() != payload["config_hash"]:
        raise ValueError(f"config hash mismatch in checkpoint {path}")
    return Checkpoint(
        config=config,
        state=payload["state"],
        ema_state=payload["ema_state"],
        schedule=payload["schedule"],
        metadata=payload["metadata"],
    )
