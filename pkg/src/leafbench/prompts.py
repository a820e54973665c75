"""Classification prompt and fine-tune record rendering, plus response parsing.

The rendered strings are contracts: golden files in the test suite pin them
byte-for-byte, and ``docs/prompt-format.md`` documents the layout. Rendering
is pure; nothing here touches the filesystem except :func:`write_jsonl`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import MissingCategoryKey, NoJsonFound, PromptError, UnknownCategory

TEMPLATE_VERSION = 1

# Single-message classification prompt. The category list is rendered in
# Python list notation (single quotes); the completion contract is a bare
# one-key JSON object.
CLASSIFICATION_TEMPLATE = (
    "Analyze the provided image of an {plant} leaf using your computer vision capabilities."
    " Classify the leaf into the most appropriate category based on its condition, choosing from"
    " the predefined list: {categories}. Provide your final classification"
    ' in the following JSON format without explanations: {{"category": "chosen_category_name"}}'
)

# Fine-tune record prompt. Unlike the classification prompt it spells the
# category list as an indented JSON object and ends with the indented
# completion layout; fragments join with single spaces.
FINETUNE_TEMPLATE = (
    "Analyze the provided image of an {plant} leaf using your computer vision capabilities."
    " Classify the leaf into the most appropriate category based on its condition,"
    " choosing from the predefined list: {categories_block}"
    " Provide your final classification in the following JSON format without explanations:"
    " {completion_layout}"
)

COMPLETION_PLACEHOLDER = "chosen_category_name"


def completion_text(category: str) -> str:
    """Indented one-key JSON completion, e.g. ``{\\n  "category": "scab" \\n}``."""
    return '{\n  "category": "' + category + '" \n}'


def categories_block(categories: Sequence[str]) -> str:
    """Indented JSON category list used inside fine-tune prompts."""
    lines = [f'    "{c}", ' for c in categories[:-1]] + [f'    "{categories[-1]}" ']
    return '{\n  "categories": [\n' + "\n".join(lines) + "\n  ]\n}"


@dataclass(frozen=True)
class PromptContext:
    """Plant, its category list (sorted ascending) and the image to classify.

    ``image_url`` may be left unset when the context only drives fine-tune
    record rendering, where each record carries its own sample URL.
    """

    plant: str
    categories: tuple[str, ...]
    image_url: str | None = None

    def __post_init__(self):
        if not self.categories:
            raise PromptError("empty category list")
        if list(self.categories) != sorted(self.categories):
            raise PromptError("categories must be sorted ascending")
        if self.image_url is not None and _malformed_url(self.image_url):
            raise PromptError(f"malformed image URL {self.image_url!r}")


def _malformed_url(url: str) -> bool:
    # Relative paths are legitimate (the hosting base is prepended upstream),
    # so the only hard requirements are non-emptiness and no whitespace.
    return not url or any(ch.isspace() for ch in url)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImageUrlPart:
    url: str


@dataclass(frozen=True)
class Message:
    role: str  # "user" | "assistant"
    parts: tuple[TextPart | ImageUrlPart, ...]


@dataclass(frozen=True)
class MessageSequence:
    messages: tuple[Message, ...]

    def text(self) -> str:
        return " ".join(p.text for m in self.messages for p in m.parts if isinstance(p, TextPart))

    def image_urls(self) -> tuple[str, ...]:
        return tuple(p.url for m in self.messages for p in m.parts if isinstance(p, ImageUrlPart))

    def to_wire(self) -> list[dict]:
        """OpenAI-style message dicts; lone text parts collapse to plain strings."""
        out = []
        for m in self.messages:
            if len(m.parts) == 1 and isinstance(m.parts[0], TextPart):
                out.append({"role": m.role, "content": m.parts[0].text})
            else:
                content = []
                for p in m.parts:
                    if isinstance(p, TextPart):
                        content.append({"type": "text", "text": p.text})
                    else:
                        content.append({"type": "image_url", "image_url": {"url": p.url}})
                out.append({"role": m.role, "content": content})
        return out


@dataclass(frozen=True)
class FineTuneRecord:
    """One prompt/completion training pair."""

    request: MessageSequence
    completion: Message

    def completion_category(self) -> str:
        return json.loads(self.completion.parts[0].text)["category"]

    def to_json_obj(self) -> dict:
        messages = list(self.request.to_wire())
        messages.append({"role": "assistant", "content": self.completion.parts[0].text})
        return {"messages": messages}

    def to_json_line(self) -> str:
        return json.dumps(self.to_json_obj(), ensure_ascii=False, separators=(", ", ": "))


def _display_plant(plant: str) -> str:
    return plant.capitalize()


def render_classification_prompt(ctx: PromptContext) -> MessageSequence:
    """Single user message: the filled classification template plus the image URL."""
    if ctx.image_url is None:
        raise PromptError("classification prompt needs an image URL")
    text = CLASSIFICATION_TEMPLATE.format(
        plant=_display_plant(ctx.plant),
        categories=str([str(c) for c in ctx.categories]),
    )
    message = Message(role="user", parts=(TextPart(text), ImageUrlPart(ctx.image_url)))
    return MessageSequence(messages=(message,))


def render_finetune_record(sample, ctx: PromptContext) -> FineTuneRecord:
    """Fine-tune pair: user text message, user image message, assistant completion.

    ``sample`` is any object with ``label`` and ``public_url`` attributes
    (normally a dataset ``ImageSample``).
    """
    if sample.label not in ctx.categories:
        raise PromptError(f"label {sample.label!r} not in categories {ctx.categories}")
    if not sample.public_url:
        raise PromptError(f"sample {sample.id!r} has no public URL")
    text = FINETUNE_TEMPLATE.format(
        plant=ctx.plant,
        categories_block=categories_block(ctx.categories),
        completion_layout=completion_text(COMPLETION_PLACEHOLDER),
    )
    request = MessageSequence(
        messages=(
            Message(role="user", parts=(TextPart(text),)),
            Message(role="user", parts=(ImageUrlPart(sample.public_url),)),
        )
    )
    completion = Message(role="assistant", parts=(TextPart(completion_text(sample.label)),))
    return FineTuneRecord(request=request, completion=completion)


def write_jsonl(records: Iterable[FineTuneRecord], dest: Path | str) -> Path:
    """One record per line, LF-terminated, stable field order."""
    records = list(records)
    if not records:
        raise PromptError("refusing to write an empty JSONL file")
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", encoding="utf-8", newline="") as fh:
        for record in records:
            fh.write(record.to_json_line())
            fh.write("\n")
    return dest


def _first_json_object(raw: str) -> dict:
    decoder = json.JSONDecoder()
    idx = raw.find("{")
    while idx != -1:
        try:
            obj, _ = decoder.raw_decode(raw, idx)
        except ValueError:
            obj = None
        if isinstance(obj, dict):
            return obj
        idx = raw.find("{", idx + 1)
    raise NoJsonFound(f"no JSON object in response {raw[:80]!r}")


def parse_category_response(raw: str, allowed: Sequence[str], strict: bool = False) -> str:
    """Reduce a model response to one of ``allowed``, returned in canonical form.

    Lenient mode (the default) takes the first balanced JSON object found in
    the response and matches its ``category`` value case-insensitively, since
    zero-shot models wrap their answer in prose. Strict mode requires the
    whole response to be the JSON object.
    """
    if not allowed:
        raise PromptError("allowed category list is empty")
    if strict:
        try:
            obj = json.loads(raw)
        except ValueError:
            raise NoJsonFound(f"response is not bare JSON: {raw[:80]!r}") from None
        if not isinstance(obj, dict):
            raise NoJsonFound(f"response is not a JSON object: {raw[:80]!r}")
    else:
        obj = _first_json_object(raw)
    if "category" not in obj:
        raise MissingCategoryKey(f"no 'category' key in {obj!r}")
    value = obj["category"]
    if isinstance(value, str):
        for canonical in allowed:
            if value.strip().lower() == canonical.lower():
                return canonical
    raise UnknownCategory(f"category {value!r} not in {list(allowed)}")
