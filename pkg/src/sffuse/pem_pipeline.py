"""Preferred-evidence-modality annotation pipeline.

Each instance is probed under three input settings (audio-only, video-only,
audio+video). Per setting we draw n chain-of-thought samples, call the
setting solvable when the answer-accuracy rate and the pairwise CoT
embedding consistency both clear their thresholds, and map the three
solvability flags through a fixed decision table to a PEM label or a
discard reason. Defaults: n=8, accuracy threshold 0.75, consistency
threshold 0.8, both inclusive.

Samplers are pluggable: a deterministic mock for tests and offline runs,
and an HTTP chat-completion adapter for real probing. Media fields are
opaque references forwarded to the sampler; no decoding happens here.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .normalize import answers_match
from .tag_grammar import PemLabel


class PipelineError(Exception):
    """Base class for annotation pipeline failures."""


class EmptyDatasetError(PipelineError):
    pass


class SamplingError(PipelineError):
    """A sampler endpoint failed or returned an unusable completion."""


class EmbeddingError(PipelineError):
    """An embedder endpoint failed or returned unusable vectors."""


class ProbeSetting(enum.Enum):
    A = "A"
    V = "V"
    AV = "AV"


PROBE_SETTINGS = (ProbeSetting.A, ProbeSetting.V, ProbeSetting.AV)


@dataclass(frozen=True)
class MediaRefs:
    audio_ref: str = ""
    video_ref: str = ""


@dataclass(frozen=True)
class Instance:
    id: str
    question: str
    media: MediaRefs
    gold_answer: str
    choices: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.gold_answer:
            raise ValueError(f"instance {self.id!r}: gold_answer must be nonempty")
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))


@dataclass(frozen=True)
class SampleSet:
    """n sampled (answer, cot_text) pairs for one (instance, setting)."""

    setting: ProbeSetting
    samples: tuple[tuple[str, str], ...]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "samples", tuple((str(a), str(c)) for a, c in self.samples))
        if len(self.samples) < 2:
            raise ValueError("a sample set needs n >= 2 samples")

    @property
    def answers(self) -> list[str]:
        return [a for a, _ in self.samples]

    @property
    def cot_texts(self) -> list[str]:
        return [c for _, c in self.samples]


@dataclass(frozen=True)
class SolvabilityRecord:
    accuracy_rate: float
    consistency: float
    solvable: bool

    def to_dict(self) -> dict:
        return {
            "accuracy_rate": self.accuracy_rate,
            "consistency": self.consistency,
            "solvable": self.solvable,
        }


class DiscardReason(enum.Enum):
    TRIVIALLY_EASY = "TriviallyEasy"
    AMBIGUOUS = "Ambiguous"
    CONTRADICTORY = "Contradictory"
    UNSOLVABLE = "Unsolvable"


@dataclass(frozen=True)
class Discard:
    reason: DiscardReason


@dataclass(frozen=True)
class PemRecord:
    instance_id: str
    settings: Mapping[ProbeSetting, SolvabilityRecord]
    decision: PemLabel | Discard

    def __post_init__(self) -> None:
        object.__setattr__(self, "settings", dict(self.settings))

    @property
    def label(self) -> PemLabel | None:
        return self.decision if isinstance(self.decision, PemLabel) else None

    def to_dict(self) -> dict:
        if isinstance(self.decision, PemLabel):
            decision = {"kind": "label", "label": self.decision.serialized}
        else:
            decision = {"kind": "discard", "reason": self.decision.reason.value}
        return {
            "id": self.instance_id,
            "settings": {s.value: self.settings[s].to_dict() for s in PROBE_SETTINGS},
            "decision": decision,
        }


@dataclass(frozen=True)
class EndpointConfig:
    """HTTP chat-completion endpoint settings; token read from the environment."""

    base_url: str = ""
    model: str = "probe-model"
    temperature: float = 1.0
    timeout: float = 30.0
    retries: int = 2
    auth_env: str = "SFFUSE_API_TOKEN"


@dataclass(frozen=True)
class PipelineConfig:
    n: int = 8
    tau_acc: float = 0.75
    tau_cons: float = 0.8
    parallelism: int = 1
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)
    embedder_endpoint: EndpointConfig = field(default_factory=EndpointConfig)

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("n must be >= 2")
        for name in ("tau_acc", "tau_cons"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


class CotSampler(Protocol):
    def sample(self, instance: Instance, setting: ProbeSetting, n: int) -> SampleSet:
        ...


class TextEmbedder(Protocol):
    def embed(self, texts: Sequence[str]) -> np.ndarray:
        ...


# --- Screening ---------------------------------------------------------------

def accuracy_rate(samples: SampleSet, gold: str) -> float:
    """Fraction of sampled answers matching gold after normalization."""
    if not samples.samples:
        raise ValueError("empty sample set")
    hits = sum(1 for answer in samples.answers if answers_match(answer, gold))
    return hits / len(samples.samples)


def consistency(cot_texts: Sequence[str], embedder: TextEmbedder) -> float:
    """Mean cosine similarity over all unordered pairs of CoT texts.

    Embeddings are re-normalized to unit length here, so any finite nonzero
    vectors are acceptable from the embedder. Pair dots are reduced with
    fsum, making the result exactly permutation-invariant.
    """
    if len(cot_texts) < 2:
        raise ValueError("consistency needs at least 2 texts")
    vectors = np.asarray(embedder.embed(list(cot_texts)), dtype=float)
    if vectors.ndim != 2 or vectors.shape[0] != len(cot_texts):
        raise ValueError("embedder must return one vector per text")
    if not np.isfinite(vectors).all():
        raise ValueError("embedder returned non-finite values")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("embedder returned a zero vector")
    unit = vectors / norms
    n = len(cot_texts)
    dots = [float(np.sum(unit[i] * unit[j]))
            for i in range(n) for j in range(i + 1, n)]
    return math.fsum(dots) / len(dots)


def solvable(accuracy: float, cot_consistency: float, cfg: PipelineConfig) -> bool:
    """Both thresholds are inclusive ("at least")."""
    return accuracy >= cfg.tau_acc and cot_consistency >= cfg.tau_cons


def probe_record(samples: SampleSet, gold: str, embedder: TextEmbedder,
                 cfg: PipelineConfig) -> SolvabilityRecord:
    acc = accuracy_rate(samples, gold)
    cons = consistency(samples.cot_texts, embedder)
    return SolvabilityRecord(acc, cons, solvable(acc, cons, cfg))


# --- Decision table ----------------------------------------------------------

def decide_pem(solvable_a: bool, solvable_v: bool, solvable_av: bool) -> PemLabel | Discard:
    """Total decision over the 8 solvability patterns.

    Labels require the audio+video setting to be solvable; patterns where a
    single modality solves but AV does not are non-monotonic and discarded
    as Contradictory (this outranks the two-single-modality Ambiguous
    reading of (1,1,0)); all-solvable carries no modality signal and
    nothing-solvable is unusable.
    """
    pattern = (solvable_a, solvable_v, solvable_av)
    if pattern == (True, False, True):
        return PemLabel.AUDIO
    if pattern == (False, True, True):
        return PemLabel.VISUAL
    if pattern == (False, False, True):
        return PemLabel.AUDIO_VISUAL
    if pattern == (True, True, True):
        return Discard(DiscardReason.TRIVIALLY_EASY)
    if pattern == (False, False, False):
        return Discard(DiscardReason.UNSOLVABLE)
    return Discard(DiscardReason.CONTRADICTORY)


# --- Batch annotation ---------------------------------------------------------

@dataclass(frozen=True)
class PipelineStats:
    total: int
    labeled: int
    discarded: int
    failed: int
    label_counts: dict[str, int]
    discard_counts: dict[str, int]
    failures: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "labeled": self.labeled,
            "discarded": self.discarded,
            "failed": self.failed,
            "label_counts": dict(self.label_counts),
            "discard_counts": dict(self.discard_counts),
            "failures": list(self.failures),
        }


@dataclass(frozen=True)
class AnnotationResult:
    records: tuple[PemRecord, ...]
    labeled: tuple[dict, ...]
    stats: PipelineStats


def annotate(
    dataset: Sequence[Instance],
    sampler: CotSampler,
    embedder: TextEmbedder,
    cfg: PipelineConfig,
) -> AnnotationResult:
    """Probe, screen, and label a dataset.

    Instances are processed under the configured parallelism bound; results
    are keyed and ordered by instance id, so output is independent of
    schedule. Per-instance sampler or embedder failures are recorded in the
    stats and skipped, never aborting the batch.
    """
    if not dataset:
        raise EmptyDatasetError("dataset is empty")
    ids = [inst.id for inst in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("instance ids must be unique within a dataset")

    def process(instance: Instance) -> tuple[PemRecord, str]:
        per_setting: dict[ProbeSetting, SolvabilityRecord] = {}
        av_cot = ""
        for setting in PROBE_SETTINGS:
            samples = sampler.sample(instance, setting, cfg.n)
            if len(samples.samples) != cfg.n:
                raise SamplingError(
                    f"sampler returned {len(samples.samples)} samples, wanted {cfg.n}")
            if setting is ProbeSetting.AV:
                av_cot = samples.cot_texts[0]
            per_setting[setting] = probe_record(
                samples, instance.gold_answer, embedder, cfg)
        decision = decide_pem(
            per_setting[ProbeSetting.A].solvable,
            per_setting[ProbeSetting.V].solvable,
            per_setting[ProbeSetting.AV].solvable,
        )
        return PemRecord(instance.id, per_setting, decision), av_cot

    outcomes: dict[str, tuple[PemRecord, str]] = {}
    failures: dict[str, dict] = {}
    if cfg.parallelism == 1:
        for instance in dataset:
            try:
                outcomes[instance.id] = process(instance)
            except Exception as exc:
                failures[instance.id] = {"id": instance.id, "error": str(exc)}
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            futures = {inst.id: pool.submit(process, inst) for inst in dataset}
            for instance_id, future in futures.items():
                try:
                    outcomes[instance_id] = future.result()
                except Exception as exc:
                    failures[instance_id] = {"id": instance_id, "error": str(exc)}

    by_id = {inst.id: inst for inst in dataset}
    records = []
    labeled = []
    label_counts = {label.serialized: 0 for label in PemLabel}
    discard_counts = {reason.value: 0 for reason in DiscardReason}
    for instance_id in sorted(outcomes):
        record, av_cot = outcomes[instance_id]
        records.append(record)
        if isinstance(record.decision, PemLabel):
            label_counts[record.decision.serialized] += 1
            labeled.append(labeled_export(by_id[instance_id], record, av_cot))
        else:
            discard_counts[record.decision.reason.value] += 1

    stats = PipelineStats(
        total=len(dataset),
        labeled=len(labeled),
        discarded=len(records) - len(labeled),
        failed=len(failures),
        label_counts=label_counts,
        discard_counts=discard_counts,
        failures=tuple(failures[key] for key in sorted(failures)),
    )
    return AnnotationResult(tuple(records), tuple(labeled), stats)


def labeled_export(instance: Instance, record: PemRecord, cot: str) -> dict:
    """Training-ready record for a labeled instance. The exported rationale
    is the first AV sample in sampling order, making exports deterministic
    given the sampler's stream."""
    out = {
        "id": instance.id,
        "question": instance.question,
        "media": {"audio_ref": instance.media.audio_ref,
                  "video_ref": instance.media.video_ref},
        "gold_answer": instance.gold_answer,
        "pem": record.decision.serialized,
        "evidence": {s.value: record.settings[s].to_dict() for s in PROBE_SETTINGS},
        "cot": cot,
    }
    if instance.choices is not None:
        out["choices"] = list(instance.choices)
    return out


# --- Dataset I/O ---------------------------------------------------------------

def read_instances(path: str | Path) -> list[Instance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            try:
                media = obj.get("media", {})
                instances.append(Instance(
                    id=str(obj["id"]),
                    question=str(obj["question"]),
                    media=MediaRefs(
                        audio_ref=str(media.get("audio_ref", "")),
                        video_ref=str(media.get("video_ref", "")),
                    ),
                    gold_answer=str(obj["gold_answer"]),
                    choices=tuple(obj["choices"]) if "choices" in obj else None,
                ))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from exc
    return instances


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
            count += 1
    return count


# --- Deterministic mock sampler and embedder -----------------------------------

_SOLVABLE_MARKER = re.compile(r"solvable=((?:AV|A|V)(?:,(?:AV|A|V))*|none)\b")


def _scripted_pattern(instance: Instance) -> set[ProbeSetting]:
    """Read a 'solvable=A,AV' marker from the media refs or question.

    The marker scripts which settings the mock treats as solvable; without
    one, every setting solves (the trivially-easy pattern).
    """
    haystack = " ".join(
        (instance.media.audio_ref, instance.media.video_ref, instance.question))
    match = _SOLVABLE_MARKER.search(haystack)
    if match is None:
        return set(PROBE_SETTINGS)
    if match.group(1) == "none":
        return set()
    return {ProbeSetting(token) for token in match.group(1).split(",")}


class MockCotSampler:
    """Offline sampler with scripted per-setting solvability.

    Solvable settings yield n identical gold-answer samples (accuracy 1,
    consistency 1); unsolvable settings yield n distinct wrong answers with
    divergent rationales.
    """

    def sample(self, instance: Instance, setting: ProbeSetting, n: int) -> SampleSet:
        if n < 2:
            raise ValueError("n must be >= 2")
        if setting in _scripted_pattern(instance):
            answer = instance.gold_answer
            cot = (f"Under the {setting.value} input the evidence for "
                   f"{instance.id} is stable and supports: {answer}.")
            samples = tuple((answer, cot) for _ in range(n))
        else:
            samples = tuple(
                (f"not-{instance.gold_answer}-{k}",
                 f"Attempt {k}: speculative {setting.value} reading of "
                 f"{instance.id} with no firm evidence.")
                for k in range(n))
        return SampleSet(setting=setting, samples=samples)


class ScriptedSampler:
    """Test sampler returning pre-recorded sample lists keyed by (id, setting)."""

    def __init__(self, script: Mapping[tuple[str, ProbeSetting], Sequence[tuple[str, str]]]):
        self._script = dict(script)

    def sample(self, instance: Instance, setting: ProbeSetting, n: int) -> SampleSet:
        if n < 2:
            raise ValueError("n must be >= 2")
        key = (instance.id, setting)
        if key not in self._script:
            raise SamplingError(f"no scripted samples for {key}")
        return SampleSet(setting=setting, samples=tuple(self._script[key][:n]))


class HashEmbedder:
    """Deterministic text embedder: unit vectors derived from SHA-256 bytes.

    Identical texts map to identical vectors (cosine 1); distinct texts map
    to pseudo-random directions with near-zero expected cosine. Stable
    across platforms, so goldens built on it are byte-reproducible.
    """

    def __init__(self, dim: int = 32):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim

    def _vector(self, text: str) -> np.ndarray:
        values: list[float] = []
        counter = 0
        while len(values) < self.dim:
            digest = hashlib.sha256(f"{counter}:{text}".encode()).digest()
            for offset in range(0, len(digest), 8):
                values.append(
                    int.from_bytes(digest[offset:offset + 8], "big") / 2 ** 63 - 1.0)
            counter += 1
        vec = np.array(values[: self.dim], dtype=float)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            norm = 1.0
        return vec / norm

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(t) for t in texts])


# --- HTTP endpoint adapter -------------------------------------------------------

_PROMPT_FILES = {
    ProbeSetting.A: "probe_a.txt",
    ProbeSetting.V: "probe_v.txt",
    ProbeSetting.AV: "probe_av.txt",
}

_ANSWER_LINE = re.compile(r"(?im)^answer:\s*(.+?)\s*$")

Transport = Callable[[str, dict, dict, float], dict]


def _urllib_transport(url: str, payload: dict, headers: dict, timeout: float) -> dict:
    request = urllib.request.Request(
        url,
        data=json.dumps(payload).encode("utf-8"),
        headers={"Content-Type": "application/json", **headers},
        method="POST",
    )
    with urllib.request.urlopen(request, timeout=timeout) as response:
        return json.loads(response.read().decode("utf-8"))


def load_prompt_template(setting: ProbeSetting, prompt_dir: str | Path | None = None) -> str:
    """Editable prompt fixture for one probe setting."""
    name = _PROMPT_FILES[setting]
    if prompt_dir is not None:
        return (Path(prompt_dir) / name).read_text(encoding="utf-8")
    return resources.files("sffuse").joinpath("prompts", name).read_text(encoding="utf-8")


def build_probe_prompt(instance: Instance, setting: ProbeSetting,
                       prompt_dir: str | Path | None = None) -> str:
    template = load_prompt_template(setting, prompt_dir)
    if instance.choices:
        choices_block = "Choices: " + " | ".join(instance.choices)
    else:
        choices_block = "Answer freely."
    return template.format(question=instance.question, choices_block=choices_block)


def parse_completion(content: str) -> tuple[str, str]:
    """Split one completion into (answer, cot_text).

    The answer is the last 'Answer:' line; the CoT is the full completion
    text (consistency is computed on the whole trace).
    """
    matches = _ANSWER_LINE.findall(content)
    if not matches:
        raise SamplingError("completion has no 'Answer:' line")
    return matches[-1], content


class HttpSampler:
    """Chat-completion endpoint adapter for modality probing.

    Builds the per-setting probing prompt, forwards the relevant opaque
    media references, and parses n completions into a sample set. Transport
    errors are retried up to the configured count; anything else becomes a
    typed SamplingError.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        token: str | None = None,
        prompt_dir: str | Path | None = None,
        transport: Transport = _urllib_transport,
    ):
        if not endpoint.base_url:
            raise ValueError("endpoint base_url is required")
        self.endpoint = endpoint
        self.token = token
        self.prompt_dir = prompt_dir
        self.transport = transport

    def _media_payload(self, instance: Instance, setting: ProbeSetting) -> dict:
        media = {}
        if setting in (ProbeSetting.A, ProbeSetting.AV):
            media["audio_ref"] = instance.media.audio_ref
        if setting in (ProbeSetting.V, ProbeSetting.AV):
            media["video_ref"] = instance.media.video_ref
        return media

    def sample(self, instance: Instance, setting: ProbeSetting, n: int) -> SampleSet:
        if n < 2:
            raise ValueError("n must be >= 2")
        payload = {
            "model": self.endpoint.model,
            "messages": [
                {"role": "user",
                 "content": build_probe_prompt(instance, setting, self.prompt_dir)},
            ],
            "media": self._media_payload(instance, setting),
            "n": n,
            "temperature": self.endpoint.temperature,
        }
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"

        last_error: Exception | None = None
        for _ in range(self.endpoint.retries + 1):
            try:
                response = self.transport(
                    self.endpoint.base_url, payload, headers, self.endpoint.timeout)
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last_error = exc
        else:
            raise SamplingError(
                f"endpoint unreachable for {instance.id}/{setting.value}: {last_error}")

        choices = response.get("choices")
        if not isinstance(choices, list) or len(choices) != n:
            raise SamplingError(
                f"endpoint returned {0 if not isinstance(choices, list) else len(choices)} "
                f"completions for {instance.id}/{setting.value}, wanted {n}")
        samples = []
        for choice in choices:
            try:
                content = choice["message"]["content"]
            except (KeyError, TypeError) as exc:
                raise SamplingError(
                    f"malformed completion for {instance.id}/{setting.value}") from exc
            samples.append(parse_completion(str(content)))
        return SampleSet(setting=setting, samples=tuple(samples))


class HttpEmbedder:
    """Embedding endpoint adapter: {model, input: [...]} in, vectors out."""

    def __init__(
        self,
        endpoint: EndpointConfig,
        token: str | None = None,
        transport: Transport = _urllib_transport,
    ):
        if not endpoint.base_url:
            raise ValueError("embedder base_url is required")
        self.endpoint = endpoint
        self.token = token
        self.transport = transport

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        payload = {"model": self.endpoint.model, "input": list(texts)}
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for _ in range(self.endpoint.retries + 1):
            try:
                response = self.transport(
                    self.endpoint.base_url, payload, headers, self.endpoint.timeout)
                break
            except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
                last_error = exc
        else:
            raise EmbeddingError(f"embedder unreachable: {last_error}")
        try:
            vectors = [row["embedding"] for row in response["data"]]
        except (KeyError, TypeError) as exc:
            raise EmbeddingError("malformed embedding response") from exc
        if len(vectors) != len(texts):
            raise EmbeddingError(
                f"embedder returned {len(vectors)} vectors for {len(texts)} texts")
        return np.asarray(vectors, dtype=float)
