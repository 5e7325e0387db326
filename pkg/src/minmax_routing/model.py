"""Transformer policy for min-max routing.

Encoder: linear city/agent embeddings (agents optionally offset by a
sinusoidal multi-agent positional encoding that imposes a virtual agent
order), followed by self-attention blocks with batch normalization and
feedforward sublayers. Context encoder: aggregates problem mean, active-agent,
scale-ratio and distance information into the decoding context. Decoder:
multi-head glimpse over the node embeddings plus a clipped single-head
pointer that yields the action distribution.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import env
from .errors import ConfigError, IllegalStateError, InfeasibleInstanceError
from .instances import Instance


class DecodeMode(str, enum.Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 128
    num_heads: int = 8
    num_encoder_layers: int = 3
    feedforward_dim: int = 512
    logit_clip: float = 10.0
    use_mpe: bool = True
    use_context_encoder: bool = True

    def __post_init__(self):
        if self.embed_dim <= 0 or self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be a positive even integer")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.num_encoder_layers < 1 or self.feedforward_dim < 1:
            raise ConfigError("num_encoder_layers and feedforward_dim must be >= 1")
        if not self.logit_clip > 0:
            raise ConfigError("logit_clip must be positive")


def _softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    # Equivalent to torch.softmax(x, -1); written out because the fused kernel
    # is slow for many tiny rows on CPU.
    shifted = x - x.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def _log_softmax_bounded(logits: torch.Tensor) -> torch.Tensor:
    # Valid when finite logits are bounded (tanh-clipped) so no max shift is
    # needed; -inf entries contribute exp(-inf) = 0.
    return logits - torch.log(torch.exp(logits).sum(dim=-1, keepdim=True))


def positional_encoding(num_agents: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal encoding; row m is position m-1. Deterministic, parameter-free."""
    if num_agents < 1:
        raise ValueError("num_agents must be >= 1")
    if dim % 2 != 0:
        raise ValueError("dim must be even")
    pos = torch.arange(num_agents, dtype=torch.float64).unsqueeze(1)
    div = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(num_agents, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / div)
    pe[:, 1::2] = torch.cos(pos / div)
    return pe.to(dtype)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (batch, tokens, dim)
        b, t, d = x.shape
        q = self.wq(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        att = _softmax_lastdim(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim))
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.wo(out)


class EncoderBlock(nn.Module):
    """Self-attention and feedforward sublayers with residuals, each followed
    by feature normalization over the flattened batch of tokens."""

    def __init__(self, dim: int, num_heads: int, feedforward_dim: int):
        super().__init__()
        self.attention = MultiHeadSelfAttention(dim, num_heads)
        self.norm1 = nn.BatchNorm1d(dim)
        self.feedforward = nn.Sequential(
            nn.Linear(dim, feedforward_dim), nn.ReLU(inplace=True), nn.Linear(feedforward_dim, dim)
        )
        self.norm2 = nn.BatchNorm1d(dim)

    @staticmethod
    def _normalize(norm: nn.BatchNorm1d, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        return norm(x.reshape(b * t, d)).view(b, t, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self._normalize(self.norm1, x + self.attention(x))
        x = self._normalize(self.norm2, x + self.feedforward(x))
        return x


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.city_embed = nn.Linear(2, config.embed_dim)
        self.agent_embed = nn.Linear(2, config.embed_dim)
        self.blocks = nn.ModuleList(
            EncoderBlock(config.embed_dim, config.num_heads, config.feedforward_dim)
            for _ in range(config.num_encoder_layers)
        )

    def forward(self, city_xy: torch.Tensor, depot_xy: torch.Tensor) -> torch.Tensor:
        # city_xy: (batch, N, 2); depot_xy: (batch, M, 2) -> (batch, N+M, dim)
        cities = self.city_embed(city_xy)
        agents = self.agent_embed(depot_xy)
        if self.config.use_mpe:
            pe = positional_encoding(depot_xy.shape[1], self.config.embed_dim, dtype=agents.dtype)
            agents = agents + pe.to(agents.device)
        h = torch.cat([cities, agents], dim=1)
        for block in self.blocks:
            h = block(h)
        return h


class ContextEncoder(nn.Module):
    """Produces the decoding context c_t.

    Full mode combines four sub-contexts (problem mean, active agent, scale
    ratio, distances) through an MLP; with the context encoder disabled, c_t
    is a plain projection of (problem mean, agent context) only.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.use_full = config.use_context_encoder
        self.agent_proj = nn.Linear(2 * d, d)
        if self.use_full:
            self.scale_proj = nn.Linear(1, d)
            self.distance_proj = nn.Linear(2, d)
            self.combine = nn.Sequential(nn.Linear(4 * d, d), nn.ReLU(inplace=True), nn.Linear(d, d))
        else:
            self.combine_plain = nn.Linear(2 * d, d)

    def forward(
        self,
        h_problem: torch.Tensor,   # (batch, dim)
        h_acting: torch.Tensor,    # (batch, dim)
        h_current: torch.Tensor,   # (batch, dim)
        scale_ratio: torch.Tensor, # (batch,)
        d_source: torch.Tensor,    # (batch,)
        d_target: torch.Tensor,    # (batch,)
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        h_agent = self.agent_proj(torch.cat([h_acting, h_current], dim=-1))
        if not self.use_full:
            c = self.combine_plain(torch.cat([h_problem, h_agent], dim=-1))
            return c, {"problem": h_problem, "agent": h_agent}
        h_scale = self.scale_proj(scale_ratio.unsqueeze(-1))
        h_distance = self.distance_proj(torch.stack([d_source, d_target], dim=-1))
        c = self.combine(torch.cat([h_problem, h_agent, h_scale, h_distance], dim=-1))
        parts = {
            "problem": h_problem,
            "agent": h_agent,
            "scale": h_scale,
            "distance": h_distance,
        }
        return c, parts


class PointerDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.embed_dim
        self.num_heads = config.num_heads
        self.head_dim = d // config.num_heads
        self.logit_clip = config.logit_clip
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)
        self.pointer_key = nn.Linear(d, d, bias=False)

    def precompute(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Project keys/values once per encoded problem."""
        b, t, d = h.shape
        k = self.wk(h).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.wv(h).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k_pointer = self.pointer_key(h)
        return k, v, k_pointer

    def logits(
        self,
        contexts: torch.Tensor,  # (batch, steps, dim)
        cache: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        masks: torch.Tensor,     # (batch, steps, tokens) bool; True = feasible
    ) -> torch.Tensor:
        """Clipped, masked pointer logits for every step at once.

        The per-step glimpse queries attend over the same cached keys/values,
        so a whole trajectory reduces to two batched matmuls.
        """
        k, v, k_pointer = cache
        b, steps, d = contexts.shape
        q = self.wq(contexts).view(b, steps, self.num_heads, self.head_dim).transpose(1, 2)
        att = _softmax_lastdim(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim))
        glimpse = self.wo((att @ v).transpose(1, 2).reshape(b, steps, d))
        compat = glimpse @ k_pointer.transpose(-2, -1) / math.sqrt(d)
        logits = self.logit_clip * torch.tanh(compat)
        return logits.masked_fill(~masks, float("-inf"))

    def replay(
        self,
        contexts: torch.Tensor,
        cache: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        masks: torch.Tensor,
    ) -> torch.Tensor:
        """Log probabilities for every step at once (teacher forcing)."""
        return _log_softmax_bounded(self.logits(contexts, cache, masks))

    def step(
        self,
        context: torch.Tensor,  # (batch, dim)
        cache: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
        mask: torch.Tensor,     # (batch, tokens) bool; True = feasible
    ) -> torch.Tensor:
        """Log probabilities over tokens; infeasible entries are -inf."""
        return self.replay(context.unsqueeze(1), cache, mask.unsqueeze(1)).squeeze(1)


class RoutingPolicy(nn.Module):
    """Full policy: encoder, context encoder and pointer decoder.

    The parameter set splits into three disjoint groups (encoder / context /
    decoder); scale-adaptive finetuning updates the context group only.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.context = ContextEncoder(config)
        self.decoder = PointerDecoder(config)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def parameter_groups(self) -> dict[str, nn.Module]:
        return {"theta_en": self.encoder, "theta_context": self.context, "theta_de": self.decoder}

    # ------------------------------------------------------------------
    # Single-instance operations (reference path; the batched rollout in
    # minmax_routing.batched is the high-throughput twin).
    # ------------------------------------------------------------------
    def encode(self, instance: Instance) -> torch.Tensor:
        """(N+M, dim) node embeddings, cities first then agent tokens."""
        city_xy = torch.tensor(instance.city_coords, dtype=self.dtype).unsqueeze(0)
        depot_xy = torch.tensor(instance.depot_coords, dtype=self.dtype).unsqueeze(0)
        return self.encoder(city_xy, depot_xy).squeeze(0)

    def build_context(
        self, state: env.SequenceState, encoder_output: torch.Tensor, instance: Instance
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Context vector c_t for a non-terminal state, plus the sub-contexts."""
        if state.terminal:
            raise IllegalStateError("build_context on a terminal state")
        h = encoder_output
        h_problem = h.mean(dim=0, keepdim=True)
        h_acting = h[instance.n + state.active_agent - 1].unsqueeze(0)
        h_current = h[state.last_node - 1].unsqueeze(0)
        ratio = state.remaining_cities / state.idle_agents
        d_source = float(state.per_agent_length[state.active_agent - 1])
        d_target = _max_depot_distance(state, instance)
        kwargs = dict(dtype=h.dtype, device=h.device)
        c, parts = self.context(
            h_problem,
            h_acting,
            h_current,
            torch.tensor([ratio], **kwargs),
            torch.tensor([d_source], **kwargs),
            torch.tensor([d_target], **kwargs),
        )
        return c.squeeze(0), {name: part.squeeze(0) for name, part in parts.items()}

    def decode_step(
        self, context: torch.Tensor, encoder_output: torch.Tensor, mask: np.ndarray | torch.Tensor
    ) -> torch.Tensor:
        """Probability vector over the N+M node indices for one step."""
        mask_t = torch.as_tensor(np.asarray(mask, dtype=bool))
        if not bool(mask_t.any()):
            raise IllegalStateError("decode_step with an all-infeasible mask")
        cache = self.decoder.precompute(encoder_output.unsqueeze(0))
        log_probs = self.decoder.step(context.unsqueeze(0), cache, mask_t.unsqueeze(0))
        return log_probs.squeeze(0).exp()

    def rollout(
        self,
        instance: Instance,
        mode: DecodeMode = DecodeMode.GREEDY,
        rng: np.random.Generator | None = None,
    ) -> tuple[env.Solution, float, float]:
        """Autoregressive decode of a full solution.

        Encodes once, then loops context -> pointer -> action until terminal.
        Returns (solution, total log probability of the chosen actions, cost).
        Forced actions (a single feasible entry) still contribute their log
        probability.
        """
        mode = DecodeMode(mode)
        if mode == DecodeMode.SAMPLE and rng is None:
            raise ValueError("SAMPLE mode requires an rng")
        if not env.is_feasible_instance(instance):
            raise InfeasibleInstanceError(
                f"instance needs N >= {env.min_cities_required(instance)} for M={instance.m}"
            )
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                h = self.encode(instance)
                cache = self.decoder.precompute(h.unsqueeze(0))
                state = env.initial_state(instance)
                total_log_prob = 0.0
                while not state.terminal:
                    mask = env.feasible_actions(state, instance)
                    context, _ = self.build_context(state, h, instance)
                    log_probs = self.decoder.step(
                        context.unsqueeze(0),
                        cache,
                        torch.as_tensor(mask).unsqueeze(0),
                    ).squeeze(0)
                    if mode == DecodeMode.GREEDY:
                        choice = int(torch.argmax(log_probs).item()) + 1
                    else:
                        probs = log_probs.exp().double().numpy()
                        probs = probs / probs.sum()
                        choice = int(rng.choice(len(probs), p=probs)) + 1
                    total_log_prob += float(log_probs[choice - 1].item())
                    state = env.apply_action(state, choice, instance)
        finally:
            self.train(was_training)
        solution = env.Solution(state.partial_sequence, instance.id)
        return solution, total_log_prob, env.minmax_cost(solution, instance)


def _max_depot_distance(state: env.SequenceState, instance: Instance) -> float:
    """Max distance from the active agent's depot to the unvisited cities."""
    unvisited = ~state.visited[: instance.n]
    if not unvisited.any():
        return 0.0
    depot = instance.coord(instance.n + state.active_agent)
    dists = np.linalg.norm(instance.city_coords[unvisited] - depot, axis=1)
    return float(dists.max())


CHECKPOINT_VERSION = 1


def save_checkpoint(policy: RoutingPolicy, path: str | Path) -> Path:
    """Write config plus the three named parameter groups; round-trips bit-exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(policy.config),
        "theta_en": policy.encoder.state_dict(),
        "theta_context": policy.context.state_dict(),
        "theta_de": policy.decoder.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> RoutingPolicy:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version!r}")
    policy = RoutingPolicy(ModelConfig(**payload["config"]))
    policy.encoder.load_state_dict(payload["theta_en"])
    policy.context.load_state_dict(payload["theta_context"])
    policy.decoder.load_state_dict(payload["theta_de"])
    return policy
