from __future__ import annotations

import logging
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from typing import Sequence

import httpx

from ..domain import Example, Prediction, Prompt, Task
from ..errors import BackendError, ConfigError, InvalidOutput
from .cache import PredictionCache, cache_key
from .config import BackendConfig
from .extract import extract_label, label_scores_from_logprobs, softmax
from .http import ChatClient, first_token_logprobs, response_text
from .mock import mock_predict

log = logging.getLogger(__name__)


class Backend:
    """Obtain predictions for (prompt, example) pairs.

    Thread-safe. Identical concurrent requests share one underlying call, and
    at most ``config.concurrency`` remote calls are in flight at once.
    ``requests`` counts every predict call; ``computed`` counts calls that
    missed the cache.
    """

    def __init__(self, config: BackendConfig, cache: PredictionCache | None = None,
                 transport: httpx.BaseTransport | None = None, sleep=None) -> None:
        self.config = config
        self.cache = cache if cache is not None else PredictionCache(config.cache_dir)
        self._client: ChatClient | None = None
        if config.kind == "http":
            kwargs = {"sleep": sleep} if sleep is not None else {}
            self._client = ChatClient(config, transport=transport, **kwargs)
        self._lock = threading.Lock()
        self._inflight: dict[str, Future] = {}
        self._slots = threading.BoundedSemaphore(config.concurrency)
        self.requests = 0
        self.computed = 0
        # memo for derived artifacts (paraphrase sets) keyed by their own digests
        self.memo: dict[str, object] = {}

    @property
    def is_mock(self) -> bool:
        return self.config.kind == "mock"

    def close(self) -> None:
        if self._client is not None:
            self._client.close()

    def __enter__(self) -> Backend:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- keys -------------------------------------------------------------

    def _key(self, task: Task, prompt: Prompt, example: Example, base: Prompt | None) -> str:
        cfg = self.config
        inputs = {f: example.inputs.get(f, "") for f in task.input_fields}
        extra = {}
        if self.is_mock:
            extra = {"example_id": example.id, "gold": example.gold_label.strip(),
                     "base_text": base.text if base is not None else None}
        return cache_key(cfg.model_identity, prompt.text, inputs, cfg.wants_probs, cfg.temperature, **extra)

    @property
    def cacheable(self) -> bool:
        return self.is_mock or self.config.temperature == 0

    # -- prediction -------------------------------------------------------

    def predict(self, task: Task, prompt: Prompt, example: Example, *, base: Prompt | None = None) -> Prediction:
        """Prediction for ``example`` under ``prompt``.

        ``base`` names the prompt that ``prompt`` paraphrases, when it is a
        variant; only the mock model uses it.

        Raises:
            BackendUnavailable: transport failed after all retries.
            InvalidOutput: model text could not be mapped to a label.
        """
        with self._lock:
            self.requests += 1
        key = self._key(task, prompt, example, base)
        if not self.cacheable:
            return self._compute(task, prompt, example, base)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        with self._lock:
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = Future()
                self._inflight[key] = fut
        if not owner:
            return fut.result()
        try:
            pred = self._compute(task, prompt, example, base)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        else:
            self.cache.put(key, pred)
            fut.set_result(pred)
            return pred
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def _compute(self, task: Task, prompt: Prompt, example: Example, base: Prompt | None) -> Prediction:
        with self._lock:
            self.computed += 1
        cfg = self.config
        if self.is_mock:
            return mock_predict(cfg.mock_params, cfg.seed, task, prompt, example, base=base,
                                wants_probs=cfg.wants_probs)
        messages = [{"role": "user", "content": prompt.render(example.inputs)}]
        body = self._client.build_request(messages, logprobs=cfg.wants_probs)
        with self._slots:
            data = self._client.post(body)
        raw = response_text(data)
        if cfg.wants_probs:
            top = first_token_logprobs(data)
            scores = label_scores_from_logprobs(top, task.label_set) if top else None
            if scores is not None:
                return Prediction.from_probs(softmax(scores), task.label_set, raw_output=raw)
        label = extract_label(raw, task.label_set, example_id=example.id)
        return Prediction(label, None, raw_output=raw)

    def predict_batch(self, task: Task, prompt: Prompt, examples: Sequence[Example], *,
                      base: Prompt | None = None) -> list[Prediction | BackendError]:
        """Predictions aligned with ``examples``.

        Per-example failures are returned in place as the exception instance
        (carrying the example id) instead of aborting the batch; only
        configuration problems raise.
        """
        prompt.check_task(task)
        for ex in examples:
            if ex.gold_label.strip() not in task.label_set:
                raise ConfigError(f"example {ex.id!r} does not belong to task {task.id!r}")

        def one(ex: Example) -> Prediction | BackendError:
            try:
                return self.predict(task, prompt, ex, base=base)
            except InvalidOutput as exc:
                if exc.example_id is None:
                    exc.example_id = ex.id
                return exc
            except BackendError as exc:
                exc.example_id = ex.id
                return exc

        if self.is_mock or self.config.concurrency == 1 or len(examples) < 2:
            return [one(ex) for ex in examples]
        with ThreadPoolExecutor(max_workers=self.config.concurrency) as pool:
            return list(pool.map(one, examples))

    # -- free-form generation (paraphrasing, candidate proposals) ---------

    def complete(self, messages: Sequence[dict], *, temperature: float | None = None,
                 max_tokens: int = 2048, seed: int | None = None) -> str:
        if self._client is None:
            raise ConfigError("free-text completion needs an http backend")
        body = self._client.build_request(messages, max_tokens=max_tokens, temperature=temperature)
        if seed is not None:
            body["seed"] = seed
        with self._slots:
            return response_text(self._client.post(body))


def make_backend(config: BackendConfig, **kwargs) -> Backend:
    return Backend(config, **kwargs)
