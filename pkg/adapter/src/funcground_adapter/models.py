"""Model backends behind the adapter: protocols, stubs, checkpoint loaders.

The stubs are deterministic and dependency-free, used for wire-contract
tests and as a smoke backend. The transformers-backed loaders import their
heavy dependencies lazily and surface any loading problem as StartupError
with a diagnostic, so a misconfigured service fails fast at startup instead
of per request.
"""

from __future__ import annotations

import re
from typing import Optional, Protocol, Sequence

import numpy as np


class StartupError(RuntimeError):
    """A configured model could not be loaded."""


class ChatModel(Protocol):
    identifier: str

    def generate(
        self,
        texts: Sequence[str],
        images: Sequence[tuple[str, np.ndarray]],
        max_tokens: int,
        temperature: float,
    ) -> str: ...


class SegModel(Protocol):
    identifier: str

    def predict(
        self, image: np.ndarray, points: Sequence[tuple[int, int]]
    ) -> list[tuple[np.ndarray, float]]: ...


_TAG_INDEX = re.compile(r"<\s*frame\s+(\d+)\s*>")


class StubChatModel:
    """Deterministic affordance-format responses for contract testing."""

    identifier = "stub"

    def generate(self, texts, images, max_tokens, temperature):
        text = "\n".join(texts)
        if "Does the RED highlighted region" in text:
            return "YES"
        if not images:
            return "I need at least one image."
        tag, image = images[0]
        match = _TAG_INDEX.search(tag)
        height, width = image.shape[:2]
        center = f"({width // 2}, {height // 2})"
        if match and "functional object" in text:
            return (
                f"<affordance> functional object: stub target; "
                f"<frame {match.group(1)}>: clearest view; {center} </affordance>"
            )
        return f"<affordance> {center} </affordance>"


class StubSegModel:
    """A filled disc around every prompt point, scored 0.9."""

    identifier = "stub"

    def predict(self, image, points):
        height, width = image.shape[:2]
        radius = max(3.0, min(height, width) / 10.0)
        ys, xs = np.mgrid[0:height, 0:width]
        results = []
        for x, y in points:
            bitmap = (xs - x) ** 2 + (ys - y) ** 2 <= radius**2
            results.append((bitmap, 0.9))
        return results


class TransformersChatModel:
    """Vision-chat checkpoint served through transformers.

    Thin wrapper: images and the concatenated prompt go through the model's
    chat template; decoding is greedy at temperature 0.
    """

    def __init__(self, identifier: str, device: str):
        self.identifier = identifier
        self.device = device
        try:
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except ImportError as exc:
            raise StartupError(f"transformers unavailable for {identifier!r}: {exc}") from exc
        try:
            self.processor = AutoProcessor.from_pretrained(identifier)
            self.model = AutoModelForImageTextToText.from_pretrained(identifier).to(device)
        except Exception as exc:  # noqa: BLE001 - loader diagnostics
            raise StartupError(f"cannot load chat checkpoint {identifier!r}: {exc}") from exc

    def generate(self, texts, images, max_tokens, temperature):
        from PIL import Image

        content = []
        for tag, image in images:
            content.append({"type": "text", "text": tag})
            content.append({"type": "image"})
        content.append({"type": "text", "text": "\n".join(texts)})
        messages = [{"role": "user", "content": content}]
        prompt = self.processor.apply_chat_template(messages, add_generation_prompt=True)
        pil_images = [Image.fromarray(img) for _, img in images]
        inputs = self.processor(
            text=prompt, images=pil_images or None, return_tensors="pt"
        ).to(self.device)
        output = self.model.generate(
            **inputs,
            max_new_tokens=max_tokens,
            do_sample=temperature > 0,
            temperature=temperature if temperature > 0 else None,
        )
        generated = output[0][inputs["input_ids"].shape[1]:]
        return self.processor.decode(generated, skip_special_tokens=True)


class TransformersSegModel:
    """Point-promptable segmentation checkpoint served through transformers."""

    def __init__(self, identifier: str, device: str):
        self.identifier = identifier
        self.device = device
        try:
            from transformers import SamModel, SamProcessor
        except ImportError as exc:
            raise StartupError(f"transformers unavailable for {identifier!r}: {exc}") from exc
        try:
            self.processor = SamProcessor.from_pretrained(identifier)
            self.model = SamModel.from_pretrained(identifier).to(device)
        except Exception as exc:  # noqa: BLE001 - loader diagnostics
            raise StartupError(f"cannot load segmentation checkpoint {identifier!r}: {exc}") from exc

    def predict(self, image, points):
        from PIL import Image

        results = []
        pil = Image.fromarray(image)
        for x, y in points:
            inputs = self.processor(
                pil, input_points=[[[float(x), float(y)]]], return_tensors="pt"
            ).to(self.device)
            outputs = self.model(**inputs)
            masks = self.processor.image_processor.post_process_masks(
                outputs.pred_masks.cpu(),
                inputs["original_sizes"].cpu(),
                inputs["reshaped_input_sizes"].cpu(),
            )[0][0]
            scores = outputs.iou_scores.cpu().reshape(-1)
            for mask, score in zip(masks, scores):
                results.append((mask.numpy().astype(bool), float(score)))
        return results


def load_chat_model(identifier: Optional[str], device: str) -> Optional[ChatModel]:
    if identifier is None:
        return None
    if identifier == "stub":
        return StubChatModel()
    return TransformersChatModel(identifier, device)


def load_seg_model(identifier: Optional[str], device: str) -> Optional[SegModel]:
    if identifier is None:
        return None
    if identifier == "stub":
        return StubSegModel()
    return TransformersSegModel(identifier, device)
