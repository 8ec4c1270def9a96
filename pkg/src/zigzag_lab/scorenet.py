"""A small MLP noise predictor trained by denoising score matching.

Checkpoints are ``.npz`` archives: a JSON ``meta`` entry (architecture,
schedule table, training settings, loss history) plus one float64 array per
parameter, keyed by its state-dict name. Loading rebuilds the module and
copies the arrays back verbatim, so outputs round-trip bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .schedule import NoiseSchedule, check_step
from .score import ScorePair, check_condition

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "zigzag-lab-scorenet/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    hidden: int = 128
    depth: int = 3
    time_dim: int = 16
    cond_dropout: float = 0.1
    seed: int = 0


class EpsilonMLP(nn.Module):
    def __init__(self, dim: int, num_classes: int, num_steps: int, hidden=128, depth=3, time_dim=16):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.num_steps = num_steps
        self.time_dim = time_dim
        # the extra one-hot slot is the null condition
        layers, width = [], dim + time_dim + num_classes + 1
        for _ in range(depth):
            layers += [nn.Linear(width, hidden), nn.SiLU()]
            width = hidden
        layers.append(nn.Linear(width, dim))
        self.net = nn.Sequential(*layers)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        half = self.time_dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1))
        arg = (t.to(torch.float64) / self.num_steps)[:, None] * freqs[None, :] * 100.0
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        onehot = nn.functional.one_hot(labels, self.num_classes + 1).to(torch.float64)
        return self.net(torch.cat([x, self.time_embedding(t), onehot], dim=-1))


class NetScoreModel:
    """Numpy-facing wrapper around a trained :class:`EpsilonMLP`."""

    def __init__(self, module: EpsilonMLP, sched: NoiseSchedule, settings: TrainSettings, losses=()):
        self.module = module.eval()
        self.sched = sched
        self.settings = settings
        self.losses = list(losses)
        self.dim = module.dim
        self.num_classes = module.num_classes

    def _eval(self, x, t, label):
        check_step(self.sched, t)
        x = np.asarray(x, dtype=np.float64)
        flat = torch.from_numpy(np.ascontiguousarray(x.reshape(-1, self.dim)))
        n = flat.shape[0]
        with torch.no_grad():
            out = self.module(flat, torch.full((n,), t), torch.full((n,), label, dtype=torch.long))
        return out.numpy().reshape(x.shape)

    def epsilon(self, x, t, cond):
        check_condition(cond, self.num_classes)
        return self._eval(x, t, self.num_classes if cond is None else int(cond))

    def pair(self, x, t, cond):
        check_condition(cond, self.num_classes, allow_null=False)
        return ScorePair(self._eval(x, t, int(cond)), self._eval(x, t, self.num_classes))

    def save(self, path) -> Path:
        path = Path(path)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "architecture": {
                "dim": self.module.dim,
                "num_classes": self.module.num_classes,
                "num_steps": self.module.num_steps,
                "hidden": self.settings.hidden,
                "depth": self.settings.depth,
                "time_dim": self.module.time_dim,
            },
            "schedule": self.sched.to_dict(),
            "training": asdict(self.settings),
            "losses": self.losses,
            "param_names": list(self.module.state_dict().keys()),
        }
        arrays = {f"param:{k}": v.detach().numpy() for k, v in self.module.state_dict().items()}
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "NetScoreModel":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path}: unrecognized checkpoint format {meta.get('format')!r}")
            state = {k: torch.from_numpy(data[f"param:{k}"].copy()) for k in meta["param_names"]}
        arch = meta["architecture"]
        module = EpsilonMLP(
            arch["dim"], arch["num_classes"], arch["num_steps"],
            hidden=arch["hidden"], depth=arch["depth"], time_dim=arch["time_dim"],
        ).to(torch.float64)
        module.load_state_dict(state)
        sched = NoiseSchedule.from_alpha_bars(meta["schedule"]["alpha_bars"], kind=meta["schedule"]["kind"])
        return cls(module, sched, TrainSettings(**meta["training"]), meta["losses"])


def train_score_net(points, labels, sched: NoiseSchedule, hyper: TrainSettings | None = None,
                    num_classes: int | None = None) -> NetScoreModel:
    """Fit an :class:`EpsilonMLP` by denoising score matching with condition dropout.

    Raises ``TrainingDiverged`` on a non-finite loss.
    """
    hyper = hyper or TrainSettings()
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (n, d) array")
    if labels.shape != (points.shape[0],):
        raise ValueError("need one label per point")
    num_classes = int(num_classes if num_classes is not None else labels.max() + 1)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels outside 0..num_classes-1")

    gen = torch.Generator().manual_seed(hyper.seed)
    torch.manual_seed(hyper.seed)
    module = EpsilonMLP(points.shape[1], num_classes, sched.num_steps,
                        hidden=hyper.hidden, depth=hyper.depth, time_dim=hyper.time_dim).to(torch.float64)
    opt = torch.optim.Adam(module.parameters(), lr=hyper.lr)
    data = torch.from_numpy(points)
    lab = torch.from_numpy(labels)
    abar = torch.from_numpy(np.array(sched.alpha_bars))
    n = data.shape[0]
    losses = []
    for step in range(hyper.steps):
        idx = torch.randint(0, n, (min(hyper.batch_size, n),), generator=gen)
        x0, y = data[idx], lab[idx].clone()
        t = torch.randint(1, sched.num_steps + 1, (x0.shape[0],), generator=gen)
        drop = torch.rand(x0.shape[0], generator=gen, dtype=torch.float64) < hyper.cond_dropout
        y[drop] = num_classes
        noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
        a = abar[t][:, None]
        xt = a.sqrt() * x0 + (1 - a).sqrt() * noise
        loss = ((module(xt, t, y) - noise) ** 2).mean()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.debug("step %d loss %.5f", step, losses[-1])
    return NetScoreModel(module, sched, hyper, losses)
