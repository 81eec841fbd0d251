"""Prompt diversification: disambiguated class names crossed with content and style variations.

Two sources produce content lines: ``offline`` draws from the bundled
template list with a seeded generator, ``llm`` asks a chat-completion
endpoint.  Either way every class gets ``n_content * n_style`` prompts, and
each prompt maps to a condition code of the toy diffusion model.
"""

from __future__ import annotations

import json
import logging
import os
import re
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .conditions import ConditionCode, WorldBinding

log = logging.getLogger(__name__)

NAIVE_TEMPLATE = "a photo of a {name}"
SOURCES = ("offline", "llm")


class LexiconError(KeyError):
    pass


class DuplicateCapError(RuntimeError):
    pass


class LLMError(RuntimeError):
    """Transport or format failure of the LLM endpoint; ``raw`` holds the last response body."""

    def __init__(self, message: str, raw: str | None = None):
        super().__init__(message)
        self.raw = raw


@dataclass(frozen=True)
class LexiconEntry:
    class_name: str
    superclass: str
    gloss: str = ""

    def annotation(self) -> str:
        text = f"{self.class_name}, a {self.superclass}"
        return f"{text}; {self.gloss}" if self.gloss else text


@dataclass
class Lexicon:
    entries: dict
    content_templates: list
    styles: list

    @classmethod
    def load(cls, path=None) -> "Lexicon":
        if path is None:
            text = resources.files("dfkdlab").joinpath("data/lexicon.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        doc = json.loads(text)
        entries = {}
        for e in doc["entries"]:
            entry = LexiconEntry(e["class_name"], e["superclass"], e.get("gloss", ""))
            entries[entry.class_name] = entry
        return cls(entries, list(doc.get("content_templates", [])), list(doc.get("styles", [])))

    def __getitem__(self, name: str) -> LexiconEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise LexiconError(f"no lexicon entry for class {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries


def disambiguate(class_name: str, lexicon: Lexicon | dict) -> str:
    """``"name, a superclass; gloss"`` (gloss part omitted when empty).

    Already-annotated names come back unchanged.
    """
    entries = lexicon.entries if isinstance(lexicon, Lexicon) else lexicon
    if class_name in entries:
        return entries[class_name].annotation()
    for entry in entries.values():
        if class_name == entry.annotation():
            return class_name
    raise LexiconError(f"no lexicon entry for class {class_name!r}")


@dataclass(frozen=True)
class PromptSpec:
    class_id: int
    content_idx: int
    style_idx: int
    content_text: str
    style_text: str
    rendered: str

    def to_dict(self) -> dict:
        return asdict(self)


def render(annotated: str, content_text: str, style_text: str) -> str:
    text = content_text if annotated in content_text else f"{annotated}: {content_text}"
    return f"{text}, {style_text}" if style_text else text


# ----------------------------------------------------------------------------- LLM client


def _urllib_transport(url: str, payload: dict, headers: dict, timeout: float) -> str:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode("utf-8")


@dataclass
class LLMClient:
    """Chat-completion client: one POST of ``{model, messages, temperature}`` per request."""

    endpoint: str
    model: str = "default"
    api_key_env: str = "DFKD_LLM_API_KEY"
    timeout: float = 60.0
    transport: Callable | None = None

    def complete(self, messages: list[dict], temperature: float) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {"model": self.model, "messages": messages, "temperature": temperature}
        transport = self.transport or _urllib_transport
        try:
            raw = transport(self.endpoint, payload, headers, self.timeout)
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise LLMError(f"transport failure: {exc}") from exc
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8", errors="replace")
        try:
            content = json.loads(raw)["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LLMError(f"malformed response: {exc!r}", raw) from exc
        if not isinstance(content, str):
            raise LLMError("malformed response: message content is not a string", raw)
        return content


_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def parse_lines(text: str) -> list[str]:
    lines = []
    for line in text.splitlines():
        line = _BULLET.sub("", line).strip().strip('"').strip()
        if line:
            lines.append(line)
    return lines


def _content_request(annotated: str, n: int, avoid: list[str]) -> list[dict]:
    ask = (
        f"Subject: {annotated}.\n"
        f"Write {n} short scene descriptions of this subject for an image generator, one per line, "
        "with no numbering. Each line must describe a different setting, viewpoint or activity."
    )
    if avoid:
        ask += " Do not reuse any of these:\n" + "\n".join(avoid)
    return [
        {"role": "system", "content": "You write varied, concrete image prompts."},
        {"role": "user", "content": ask},
    ]


def llm_content_lines(client: LLMClient, annotated: str, n: int, temperature: float = 1.0,
                      retries: int = 3) -> list[str]:
    """Collect ``n`` distinct content lines, re-requesting missing ones up to ``retries`` times."""
    got: list[str] = []
    seen: set[str] = set()
    last_error: LLMError | None = None
    for _ in range(retries + 1):
        try:
            text = client.complete(_content_request(annotated, n - len(got), got), temperature)
        except LLMError as exc:
            last_error = exc
            log.warning("LLM request failed for %r: %s", annotated, exc)
            continue
        lines = parse_lines(text)
        if not lines:
            last_error = LLMError("malformed response: no content lines", text)
            continue
        last_error = None
        for line in lines:
            key = " ".join(line.lower().split())
            if key in seen:
                continue
            seen.add(key)
            got.append(line)
            if len(got) == n:
                return got
    if last_error is not None:
        raise LLMError(f"{last_error} (after {retries} retries)", last_error.raw)
    raise DuplicateCapError(f"only {len(got)} distinct content lines of {n} after {retries} retries")


# ----------------------------------------------------------------------------- diversification


def diversify(class_id: int, class_name: str, lexicon: Lexicon, n_content: int, n_style: int,
              source: str = "offline", seed: int = 0, client: LLMClient | None = None,
              temperature: float = 1.0, retries: int = 3) -> list[PromptSpec]:
    """``n_content * n_style`` prompts for one class (content-major order)."""
    if n_content < 1 or n_style < 1:
        raise ValueError("n_content and n_style must be at least 1")
    if source not in SOURCES:
        raise ValueError(f"source must be one of {SOURCES}")
    annotated = disambiguate(class_name, lexicon)
    rng = np.random.default_rng([seed, class_id, 71])
    if n_content == 1:
        contents = [NAIVE_TEMPLATE.format(name=annotated)]
    elif source == "offline":
        if n_content > len(lexicon.content_templates):
            raise DuplicateCapError(
                f"need {n_content} distinct content templates, lexicon has {len(lexicon.content_templates)}"
            )
        pick = rng.choice(len(lexicon.content_templates), size=n_content, replace=False)
        contents = [lexicon.content_templates[i].format(name=class_name) for i in pick]
    else:
        if client is None:
            raise ValueError("llm source needs an LLMClient")
        contents = llm_content_lines(client, annotated, n_content, temperature, retries)
    if n_style == 1:
        styles = [""]
    else:
        if n_style > len(lexicon.styles):
            raise DuplicateCapError(f"need {n_style} distinct styles, lexicon has {len(lexicon.styles)}")
        styles = [lexicon.styles[i] for i in rng.choice(len(lexicon.styles), size=n_style, replace=False)]
    return [
        PromptSpec(class_id, ci, si, c, s, render(annotated, c, s))
        for ci, c in enumerate(contents)
        for si, s in enumerate(styles)
    ]


def build_prompt_set(class_names: list[str], lexicon: Lexicon, n_content: int, n_style: int,
                     source: str = "offline", seed: int = 0, client: LLMClient | None = None,
                     temperature: float = 1.0, retries: int = 3, max_concurrency: int = 4) -> list[PromptSpec]:
    """Prompts for every class, assembled in class order regardless of completion order."""
    missing = [n for n in class_names if n not in lexicon]
    if missing:
        raise LexiconError(f"no lexicon entry for classes {missing}")

    def one(k):
        return diversify(k, class_names[k], lexicon, n_content, n_style, source, seed, client,
                         temperature, retries)

    if source == "llm" and max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            per_class = list(pool.map(one, range(len(class_names))))
    else:
        per_class = [one(k) for k in range(len(class_names))]
    return [p for ps in per_class for p in ps]


def encode_condition(p: PromptSpec, binding: WorldBinding) -> ConditionCode:
    c, s = p.content_idx % binding.n_content, p.style_idx % binding.n_style
    return ConditionCode(int(binding.combo_code(p.class_id, c, s)), p.class_id, c, s)


def save_prompt_set(path, prompts: list[PromptSpec]) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in prompts], indent=1, sort_keys=True) + "\n", "utf-8")


def load_prompt_set(path) -> list[PromptSpec]:
    return [PromptSpec(**d) for d in json.loads(Path(path).read_text("utf-8"))]
