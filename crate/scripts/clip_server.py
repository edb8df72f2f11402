"""Embedding server for `softlabel --encoder http://host:port`.

Wraps an open CLIP checkpoint from Hugging Face and speaks the JSON protocol
the Rust client expects:

    GET  /info         -> {"identity", "dim", "temperature"}
    POST /embed/image  {"png_base64"} -> {"embedding"}
    POST /embed/text   {"text"}       -> {"embedding"}

Usage:
    python scripts/clip_server.py --model openai/clip-vit-base-patch32 --port 8000
"""

import argparse
import base64
import io

import torch
import uvicorn
from fastapi import FastAPI
from PIL import Image
from pydantic import BaseModel
from transformers import CLIPModel, CLIPProcessor


class ImageRequest(BaseModel):
    png_base64: str


class TextRequest(BaseModel):
    text: str


def build_app(model_name: str, device: str) -> FastAPI:
    model = CLIPModel.from_pretrained(model_name).to(device).eval()
    processor = CLIPProcessor.from_pretrained(model_name)
    # CLIP learns logit_scale = 1 / temperature.
    temperature = float(1.0 / model.logit_scale.exp().item())
    dim = int(model.config.projection_dim)
    app = FastAPI()

    @app.get("/info")
    def info():
        return {"identity": model_name, "dim": dim, "temperature": temperature}

    @app.post("/embed/image")
    @torch.no_grad()
    def embed_image(req: ImageRequest):
        image = Image.open(io.BytesIO(base64.b64decode(req.png_base64))).convert("RGB")
        inputs = processor(images=image, return_tensors="pt").to(device)
        features = model.get_image_features(**inputs)[0]
        return {"embedding": features.float().cpu().tolist()}

    @app.post("/embed/text")
    @torch.no_grad()
    def embed_text(req: TextRequest):
        inputs = processor(text=[req.text], return_tensors="pt", padding=True).to(device)
        features = model.get_text_features(**inputs)[0]
        return {"embedding": features.float().cpu().tolist()}

    return app


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--model", default="openai/clip-vit-base-patch32")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    args = parser.parse_args()
    uvicorn.run(build_app(args.model, args.device), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
