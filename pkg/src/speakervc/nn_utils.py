"""Small torch helpers shared by the trainable components."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch

torch.set_num_threads(1)


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a fixed global torch seed without disturbing the caller's RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % (2**63))
        yield


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) % (2**63))
    return g


def state_hash(module_or_state) -> str:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def randperm(n: int, g: torch.Generator) -> list[int]:
    return torch.randperm(n, generator=g).tolist()


def randint(low: int, high: int, g: torch.Generator) -> int:
    """Uniform integer in [low, high)."""
    if high <= low:
        return low
    return int(torch.randint(low, high, (1,), generator=g).item())
