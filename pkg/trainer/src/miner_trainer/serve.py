"""Chat-completions HTTP server for a trained adapter.

Exposes ``POST /v1/chat/completions`` speaking the OpenAI-style wire
format: the request carries ``model``, ``messages`` (role/content
pairs), ``temperature`` and ``max_tokens``; the response returns the
completion under ``choices[0].message.content`` plus token ``usage``.
Any chat client that talks this shape — including the retrieval
pipeline's gateway — can call the endpoint unmodified.

The per-request token budget is honored but hard-capped at
``MAX_TOKENS_CAP`` (100): a request asking for more gets at most 100
generated tokens and ``finish_reason: "length"`` if it runs out.
"""

from __future__ import annotations

import logging
import sys
import threading
import time
import uuid

import torch
import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import model as model_mod
from .data import Vocab, tokenize

log = logging.getLogger(__name__)

MAX_TOKENS_CAP = 100


def _prompt_from_messages(messages: list) -> str:
    """Join non-assistant message contents into one completion prompt.

    The miner sends a single user message holding the bare fragment;
    joining also tolerates clients that prepend a system message.
    """
    parts = []
    for message in messages:
        if not isinstance(message, dict):
            continue
        if message.get("role") == "assistant":
            continue
        content = message.get("content")
        if content:
            parts.append(str(content))
    return "\n\n".join(parts)


def build_app(
    model: model_mod.TinyCausalLM,
    vocab: Vocab,
    model_name: str = "miner-lora",
    seed: int | None = None,
) -> FastAPI:
    """Wrap a loaded model in the chat-completions app."""
    app = FastAPI(title="miner-trainer adapter server")
    generator = torch.Generator()
    generator.manual_seed(seed if seed is not None else int(time.time_ns()) % (2**31))
    # one generation at a time: the tiny model is cheap, and serializing
    # keeps the sampling generator safe under concurrent requests
    gen_lock = threading.Lock()

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "model": model_name}

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        try:
            body = await request.json()
        except Exception:
            return JSONResponse({"error": "request body must be JSON"}, status_code=400)
        if not isinstance(body, dict):
            return JSONResponse({"error": "request body must be a JSON object"}, status_code=400)
        messages = body.get("messages")
        if not isinstance(messages, list) or not messages:
            return JSONResponse({"error": "messages must be a non-empty list"}, status_code=400)
        prompt = _prompt_from_messages(messages)
        if not prompt.strip():
            return JSONResponse({"error": "no prompt content in messages"}, status_code=400)
        try:
            raw_temperature = body.get("temperature")
            temperature = 0.0 if raw_temperature is None else float(raw_temperature)
            raw_max_tokens = body.get("max_tokens")
            requested = MAX_TOKENS_CAP if raw_max_tokens is None else int(raw_max_tokens)
        except (TypeError, ValueError):
            return JSONResponse(
                {"error": "temperature and max_tokens must be numbers"}, status_code=400
            )
        budget = max(1, min(requested, MAX_TOKENS_CAP))
        with gen_lock:
            completion, finish = model_mod.generate(
                model,
                vocab,
                prompt,
                max_new_tokens=budget,
                temperature=temperature,
                generator=generator,
            )
        return {
            "id": f"chatcmpl-{uuid.uuid4().hex[:20]}",
            "object": "chat.completion",
            "created": int(time.time()),
            "model": str(body.get("model") or model_name),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": completion},
                    "finish_reason": finish,
                }
            ],
            "usage": {
                "prompt_tokens": len(tokenize(prompt)),
                "completion_tokens": len(tokenize(completion)),
                "total_tokens": len(tokenize(prompt)) + len(tokenize(completion)),
            },
        }

    return app


def load_for_serving(
    adapter_dir: str, base_dir: str | None = None
) -> tuple[model_mod.TinyCausalLM, Vocab]:
    """Load base + adapter ready for inference; raises AdapterError on failure."""
    model, vocab = model_mod.load_adapter(adapter_dir, base_dir)
    model.eval()
    return model, vocab


def serve_adapter(
    adapter_dir: str,
    port: int,
    host: str = "127.0.0.1",
    base_dir: str | None = None,
    seed: int | None = None,
) -> None:
    """Load the adapter and serve it; exits nonzero if loading fails."""
    try:
        model, vocab = load_for_serving(adapter_dir, base_dir)
    except (model_mod.AdapterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        raise SystemExit(2)
    app = build_app(model, vocab, seed=seed)
    log.info("serving adapter %s on %s:%d", adapter_dir, host, port)
    uvicorn.run(app, host=host, port=port, log_level="warning")


class BackgroundServer:
    """Run the app on a real socket in a daemon thread (used by tests).

    ``uvicorn.Server.run`` blocks, so tests start it here, wait for the
    ``started`` flag, talk to the endpoint over HTTP, then stop it.
    """

    def __init__(self, app: FastAPI, host: str = "127.0.0.1", port: int = 0):
        config = uvicorn.Config(app, host=host, port=port, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.host = host

    def __enter__(self) -> "BackgroundServer":
        self.thread.start()
        deadline = time.monotonic() + 15.0
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start within 15s")
            if not self.thread.is_alive():
                raise RuntimeError("server thread died during startup")
            time.sleep(0.02)
        return self

    @property
    def port(self) -> int:
        servers = getattr(self.server, "servers", [])
        for srv in servers:
            for sock in srv.sockets:
                return sock.getsockname()[1]
        raise RuntimeError("no bound socket found")

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}/v1/chat/completions"

    def __exit__(self, *exc_info) -> None:
        self.server.should_exit = True
        self.thread.join(timeout=10.0)
