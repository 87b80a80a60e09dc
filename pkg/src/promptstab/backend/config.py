from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Mapping

from ..errors import ConfigError

DEFAULT_API_KEY_ENV = "PROMPTSTAB_API_KEY"


@dataclass(frozen=True)
class MockParams:
    """Planted-structure knobs for the mock model.

    ``a`` scales prompt quality, ``b`` example difficulty and ``c`` how much
    paraphrase noise an unstable prompt receives. Quality and stability of a
    prompt are a seeded hash term plus a bonus per distinct good/stable token
    the text contains; ``pinned`` overrides both for exact prompt texts.
    """

    a: float = 4.0
    b: float = 2.0
    c: float = 0.8
    good_tokens: tuple[str, ...] = ("carefully", "evidence", "explicitly")
    stable_tokens: tuple[str, ...] = ("exactly", "strictly", "only")
    hash_weight: float = 0.4
    token_bonus: float = 0.3
    noise_gain: float = 4.0
    pinned: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.a <= 0 or self.b <= 0:
            raise ConfigError("mock params a and b must be positive")
        if not 0.0 <= self.c <= 1.0:
            raise ConfigError("mock param c must lie in [0, 1]")
        object.__setattr__(self, "good_tokens", tuple(self.good_tokens))
        object.__setattr__(self, "stable_tokens", tuple(self.stable_tokens))
        object.__setattr__(self, "pinned", {k: (float(v[0]), float(v[1])) for k, v in dict(self.pinned).items()})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["good_tokens"] = list(self.good_tokens)
        d["stable_tokens"] = list(self.stable_tokens)
        d["pinned"] = {k: list(v) for k, v in sorted(self.pinned.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MockParams:
        kwargs = dict(d)
        for key in ("good_tokens", "stable_tokens"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"  # "http" | "mock"
    model_name: str = "mock"
    endpoint_url: str | None = None
    wants_probs: bool = True
    temperature: float = 0.0
    max_retries: int = 3
    timeout: float = 60.0
    seed: int | None = 0
    mock_params: MockParams | None = None
    concurrency: int = 4
    max_tokens: int = 16
    top_logprobs: int = 20
    backoff_base: float = 0.5
    api_key_env: str = DEFAULT_API_KEY_ENV
    cache_dir: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("http", "mock"):
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint_url:
            raise ConfigError("http backend requires endpoint_url")
        if self.kind == "mock":
            if self.seed is None:
                raise ConfigError("mock backend requires seed")
            if self.mock_params is None:
                object.__setattr__(self, "mock_params", MockParams())
        if self.max_retries < 0 or self.concurrency < 1:
            raise ConfigError("max_retries must be >= 0 and concurrency >= 1")

    @property
    def model_identity(self) -> str:
        """String that distinguishes models whose outputs may differ."""
        if self.kind == "mock":
            return "mock:" + json.dumps({"seed": self.seed, "params": self.mock_params.to_dict()}, sort_keys=True)
        return f"{self.model_name}@{self.endpoint_url}"

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mock_params"] = self.mock_params.to_dict() if self.mock_params else None
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> BackendConfig:
        kwargs = dict(d)
        if kwargs.get("mock_params") is not None:
            kwargs["mock_params"] = MockParams.from_dict(kwargs["mock_params"])
        return cls(**kwargs)
