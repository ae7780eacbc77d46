#!/usr/bin/env python3
"""Regenerate the committed test fixtures under fixtures/.

The graphs written here are small random-weight stand-ins that expose the same
interfaces as the production exports (tap names, sidecars, embedding width,
token layout). They exist so the Rust test suite can exercise the whole
pipeline without pretrained weights.

Requires: torch, onnx, numpy, Pillow, scikit-image, open_clip_torch (for the
reference BPE tokenizer and merges file).

    python3 tools/make_fixtures.py
"""

import gzip
import hashlib
import json
import os
import struct

import numpy as np
import torch
import torch.nn as nn
from PIL import Image, ImageDraw

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "fixtures")
MODELS = os.path.join(ROOT, "models")
GOLDEN = os.path.join(ROOT, "golden")
IMAGES = os.path.join(ROOT, "images")
DATASET = os.path.join(ROOT, "canonical10")

IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]
CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]
CONTEXT_LENGTH = 77
LOGIT_SCALE = 100.0


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_tensor(path, array):
    """Little-endian f32 tensor with a JSON header: `u32 len | json | data`."""
    array = np.ascontiguousarray(array, dtype="<f4")
    header = json.dumps({"shape": list(array.shape), "dtype": "f32le"}).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(array.tobytes())


def pattern_input(h, w):
    """Deterministic smooth input tensor shared with the Rust parity tests."""
    c = np.arange(3, dtype=np.float64)[:, None, None]
    y = np.arange(h, dtype=np.float64)[None, :, None]
    x = np.arange(w, dtype=np.float64)[None, None, :]
    v = np.sin(0.05 * x * (c + 1)) + np.cos(0.07 * y * (c + 1)) + 0.1 * c
    return v.astype(np.float32)[None]


class SepBlock(nn.Module):
    def __init__(self, cin, cout, k):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, k, stride=2, padding=k // 2, groups=cin)
        self.pw = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        x = self.dw(x)
        x = x * torch.sigmoid(x)
        x = self.pw(x)
        return x * torch.sigmoid(x)


class Backbone(nn.Module):
    """Stride-2 stem with 32 channels, stride-32 final block with 320 channels."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.blocks = nn.Sequential(
            SepBlock(32, 24, 3),
            SepBlock(24, 40, 5),
            SepBlock(40, 80, 3),
            SepBlock(80, 112, 5),
        )
        self.project = nn.Conv2d(112, 320, 1)

    def forward(self, x):
        s = self.stem(x)
        stem = s * torch.sigmoid(s)
        b = self.project(self.blocks(stem))
        block = b * torch.sigmoid(b)
        return stem, block


class ImageEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.patch = nn.Conv2d(3, 64, 32, stride=32)
        self.hidden = nn.Linear(64 + 3, 128)
        self.out = nn.Linear(128, 512)

    def forward(self, x):
        p = torch.tanh(self.patch(x)).mean(dim=(2, 3))
        colour = x.mean(dim=(2, 3))
        h = torch.tanh(self.hidden(torch.cat([p, colour], dim=1)))
        return self.out(h)


class TextEncoder(nn.Module):
    def __init__(self, vocab=49408, width=8):
        super().__init__()
        self.tok = nn.Embedding(vocab, width)
        self.pos = nn.Parameter(torch.randn(CONTEXT_LENGTH, width) * 0.1)
        self.hidden = nn.Linear(width, 64)
        self.out = nn.Linear(128, 512)

    def forward(self, ids):
        x = self.tok(ids) + self.pos
        h = torch.tanh(self.hidden(x))
        mask = (ids != 0).to(h.dtype).unsqueeze(-1)
        pooled = (h * mask).sum(dim=1) / mask.sum(dim=1)
        eot = ids.argmax(dim=-1)
        at_eot = h[torch.arange(h.shape[0]), eot]
        return self.out(torch.cat([at_eot, pooled], dim=1))


def sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def export_models():
    os.makedirs(MODELS, exist_ok=True)
    os.makedirs(GOLDEN, exist_ok=True)

    torch.manual_seed(0)
    backbone = Backbone().eval()
    path = os.path.join(MODELS, "backbone.onnx")
    torch.onnx.export(
        backbone,
        torch.zeros(1, 3, 64, 64),
        path,
        input_names=["image"],
        output_names=["stem_swish", "block16_swish"],
        dynamic_axes={"image": {2: "height", 3: "width"}},
        opset_version=13,
        dynamo=False,
    )
    write_json(
        os.path.join(MODELS, "backbone.meta.json"),
        {
            "input": {
                "h": None,
                "w": None,
                "channels": 3,
                "mean": IMAGENET_MEAN,
                "std": IMAGENET_STD,
                "resize_policy": "none",
            },
            "taps": ["stem_swish", "block16_swish"],
        },
    )
    for h, w, name in [(96, 128, "backbone_96x128"), (480, 640, "backbone_480x640")]:
        x = torch.from_numpy(pattern_input(h, w))
        with torch.no_grad():
            stem, block = backbone(x)
        if h == 96:
            write_tensor(os.path.join(GOLDEN, name + ".stem.bin"), stem[0].numpy())
        else:
            # The full-resolution stem tap is too large to commit; keep its channel means.
            write_json(
                os.path.join(GOLDEN, name + ".stem_summary.json"),
                {
                    "shape": list(stem[0].shape),
                    "channel_mean": [float(v) for v in stem[0].mean(dim=(1, 2))],
                },
            )
        write_tensor(os.path.join(GOLDEN, name + ".block16.bin"), block[0].numpy())

    torch.manual_seed(1)
    image_enc = ImageEncoder().eval()
    path = os.path.join(MODELS, "clip_image.onnx")
    torch.onnx.export(
        image_enc,
        torch.zeros(1, 3, 224, 224),
        path,
        input_names=["image"],
        output_names=["embedding"],
        opset_version=13,
        dynamo=False,
    )
    write_json(
        os.path.join(MODELS, "clip_image.meta.json"),
        {
            "input": {
                "h": 224,
                "w": 224,
                "channels": 3,
                "mean": CLIP_MEAN,
                "std": CLIP_STD,
                "resize_policy": "shortest_edge_center_crop",
            },
            "taps": [],
            "logit_scale": LOGIT_SCALE,
        },
    )
    with torch.no_grad():
        emb = image_enc(torch.from_numpy(pattern_input(224, 224)))
    write_tensor(os.path.join(GOLDEN, "clip_image.embedding.bin"), emb[0].numpy())

    torch.manual_seed(2)
    text_enc = TextEncoder().eval()
    path = os.path.join(MODELS, "clip_text.onnx")
    torch.onnx.export(
        text_enc,
        torch.zeros(1, CONTEXT_LENGTH, dtype=torch.int64),
        path,
        input_names=["tokens"],
        output_names=["embedding"],
        opset_version=13,
        dynamo=False,
    )
    write_json(
        os.path.join(MODELS, "clip_text.meta.json"),
        {
            "input": {"h": None, "w": None, "channels": 1, "mean": [], "std": [], "resize_policy": "none"},
            "taps": [],
            "logit_scale": LOGIT_SCALE,
            "context_length": CONTEXT_LENGTH,
        },
    )
    return text_enc


PROMPTS = [
    "",
    "a photo of a dog",
    "a photo of dog",
    "a photo of something else",
    "a photo of a animal such as dog",
    "this is a dog of a animal",
    "a photo of person",
    "a photo of traffic light",
    "a photo of fire hydrant",
    "a photo of stop sign",
    "a photo of parking meter",
    "a photo of baseball glove",
    "a photo of tennis racket",
    "a photo of wine glass",
    "a photo of hot dog",
    "a photo of potted plant",
    "a photo of dining table",
    "a photo of teddy bear",
    "a photo of hair drier",
    "a photo of toothbrush",
    "a photo of a vehicle such as motorcycle",
    "a photo of a kitchen such as microwave",
    "this is a giraffe of a animal",
    "this is a tvmonitor of a electronic",
    "a photo of aeroplane",
    "a photo of pottedplant",
    "A Photo Of A Cat",
    "   lots   of\twhitespace\n here  ",
    "it's the dog's toy, isn't it?",
    "they'll say we've done what i'd do",
    "numbers 12345 and 3.14",
    "punctuation!!! ... ??? (brackets) [square] {curly}",
    "hyphen-ated and under_scored words",
    "email@example.com and http://example.org/path",
    "café naïve résumé",
    "über straße",
    "日本語のテキスト",
    "emoji 🐶 dog",
    "a photo of a sky-scraper",
    "a photo of 2 cats",
    "a photo of the number 7",
    "a photo of a t-shirt",
    "a photo of a cell phone",
    "a photo of a remote",
    "a photo of a laptop",
    "a photo of a refrigerator",
    "a photo of an umbrella",
    "a photo of scissors",
    "unbelievably antidisestablishmentarianism",
    " ".join(["word"] * 120),
]


def export_tokens(text_enc):
    import open_clip
    from open_clip.tokenizer import SimpleTokenizer, default_bpe

    assert len(PROMPTS) == 50
    ids = open_clip.tokenize(PROMPTS, context_length=CONTEXT_LENGTH)
    write_json(
        os.path.join(GOLDEN, "tokens.golden.json"),
        {
            "context_length": CONTEXT_LENGTH,
            "prompts": PROMPTS,
            "ids": [[int(v) for v in row] for row in ids],
        },
    )
    with torch.no_grad():
        emb = text_enc(ids[:5])
    write_json(
        os.path.join(GOLDEN, "clip_text.embedding.json"),
        {"prompts": PROMPTS[:5], "embeddings": [[float(v) for v in row] for row in emb]},
    )

    merges = gzip.open(default_bpe()).read().decode("utf-8").split("\n")
    kept = merges[: 49152 - 256 - 2 + 1]
    with open(os.path.join(MODELS, "bpe_merges.txt"), "w", encoding="utf-8") as f:
        # The released file's first line is a version header; normalize it.
        f.write("#version: 0.2\n" + "\n".join(kept[1:]) + "\n")
    assert SimpleTokenizer().vocab_size == 49408


def export_images():
    import skimage.data as data

    os.makedirs(IMAGES, exist_ok=True)
    sources = {
        "coffee": data.coffee(),
        "chelsea": data.chelsea(),
        "astronaut": data.astronaut(),
        "rocket": data.rocket(),
        "immunohistochemistry": data.immunohistochemistry(),
    }
    for name, arr in sources.items():
        Image.fromarray(arr).save(os.path.join(IMAGES, name + ".jpg"), quality=90)
    Image.fromarray(data.rocket()).resize((640, 480), Image.BILINEAR).save(
        os.path.join(IMAGES, "rocket_480x640.jpg"), quality=90
    )


def export_canonical():
    """Ten synthetic 96x128 scenes with instance-id masks."""
    import skimage.data as data

    rng = np.random.RandomState(7)
    os.makedirs(os.path.join(DATASET, "images"), exist_ok=True)
    os.makedirs(os.path.join(DATASET, "masks"), exist_ok=True)
    textures = [data.coffee(), data.chelsea(), data.astronaut(), data.rocket()]
    labels = ["disc", "block", "wedge"]
    colours = {"disc": (220, 40, 40), "block": (40, 200, 60), "wedge": (40, 60, 220)}
    images = []
    for i in range(10):
        tex = textures[i % len(textures)]
        bg = Image.fromarray(tex).resize((128, 96), Image.BILINEAR)
        ids = Image.new("I", (128, 96), 0)
        draw_img = ImageDraw.Draw(bg)
        draw_ids = ImageDraw.Draw(ids)
        instances = {}
        for inst in range(1, 2 + rng.randint(0, 3)):
            label = labels[rng.randint(0, len(labels))]
            x0, y0 = rng.randint(0, 80), rng.randint(0, 56)
            x1, y1 = x0 + rng.randint(20, 48), y0 + rng.randint(20, 40)
            box = [x0, y0, min(x1, 127), min(y1, 95)]
            if label == "disc":
                draw_img.ellipse(box, fill=colours[label])
                draw_ids.ellipse(box, fill=inst)
            elif label == "block":
                draw_img.rectangle(box, fill=colours[label])
                draw_ids.rectangle(box, fill=inst)
            else:
                tri = [(box[0], box[3]), (box[2], box[3]), ((box[0] + box[2]) // 2, box[1])]
                draw_img.polygon(tri, fill=colours[label])
                draw_ids.polygon(tri, fill=inst)
            instances[str(inst)] = label
        # Later shapes may fully cover earlier ones; keep only ids that survive.
        present = set(np.unique(np.array(ids)).tolist()) - {0}
        instances = {k: v for k, v in instances.items() if int(k) in present}
        image_id = "scene%02d" % i
        bg.save(os.path.join(DATASET, "images", image_id + ".png"))
        np_ids = np.array(ids).astype(np.uint16)
        Image.fromarray(np_ids).save(os.path.join(DATASET, "masks", image_id + ".png"))
        images.append(
            {
                "id": image_id,
                "file": "images/%s.png" % image_id,
                "mask": "masks/%s.png" % image_id,
                "instances": instances,
            }
        )
    write_json(
        os.path.join(DATASET, "dataset.json"),
        {
            "schema_version": 1,
            "name": "canonical10",
            "vocabulary": {
                "categories": [
                    {"name": "disc", "super_category": "shape"},
                    {"name": "block", "super_category": "shape"},
                    {"name": "wedge", "super_category": "shape"},
                ],
                "open_set": True,
            },
            "images": images,
        },
    )


def write_manifest():
    entries = []
    for base, _, files in sorted(os.walk(ROOT)):
        for name in sorted(files):
            if name == "MANIFEST.json":
                continue
            path = os.path.join(base, name)
            entries.append({"file": os.path.relpath(path, ROOT), "sha256": sha256(path)})
    write_json(os.path.join(ROOT, "MANIFEST.json"), {"files": entries})


if __name__ == "__main__":
    text_enc = export_models()
    export_tokens(text_enc)
    export_images()
    export_canonical()
    write_manifest()
