"""Local HTTP service for interactive elicitation sessions, plus the CLI.

Routes:
    POST /sessions                      create a session (optional seed/truth)
    POST /sessions/{id}/advance         step until the next question or the end
    POST /sessions/{id}/answer          body {"seq": <question seq>, "answer": bool}
    GET  /sessions/{id}/state           current snapshot
    GET  /sessions/{id}/events?from=N   server-push stream, one JSON record per event

Single process, no auth: this is a desk tool. Sessions expire after an idle
timeout. All mutations of one session are serialized through its lock;
answers are idempotent per (session, question seq).
"""
from __future__ import annotations

import argparse
import asyncio
import json
import sys
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np

from . import elicitation, harness, theory
from .elicitation import EpisodeConfig, EpisodeEngine, InvalidAnswer, Oracle
from .gap_mdp import Descriptor, GridSpec, KnowledgeGap, ObjectDescriptor, sample_descriptor
from .quantile_policy import Hyper, QuantileModel, train

DEFAULT_PORT = 7431
SESSION_IDLE_TIMEOUT = 30 * 60.0


@dataclass
class Session:
    id: str
    engine: EpisodeEngine
    events: list[dict] = field(default_factory=list)
    answered: dict[int, bool] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)
    last_access: float = field(default_factory=time.monotonic)

    def touch(self):
        self.last_access = time.monotonic()

    @property
    def pending_seq(self) -> int | None:
        return self.engine.pending[2] if self.engine.pending else None

    def snapshot(self) -> dict:
        pending = None
        if self.engine.pending:
            predicate, text, seq = self.engine.pending
            pending = {
                "seq": seq,
                "text": text,
                "predicate": elicitation.predicate_to_json(predicate),
            }
        return {
            "id": self.id,
            "phase": self.engine.phase,
            "seq": self.engine.seq,
            "cell": list(self.engine.state.agent_cell),
            "steps": self.engine.state.steps_taken,
            "consumed": list(self.engine.state.consumed),
            "total_reward": self.engine.total_reward,
            "gap": elicitation._gap_to_json(self.engine.gap),
            "pending_question": pending,
            "done": self.engine.done,
        }


def _grid_json(spec: GridSpec) -> dict:
    return {
        "width": spec.width,
        "height": spec.height,
        "walls": sorted(list(w) for w in spec.walls),
        "start": list(spec.start),
        "goal": list(spec.goal),
        "uncertain_cells": [list(c) for c in spec.uncertain_cells],
        "step_penalty": spec.step_penalty,
        "goal_reward": spec.goal_reward,
        "episode_limit": spec.episode_limit,
    }


def create_app(spec: GridSpec, model: QuantileModel, config: EpisodeConfig):
    from fastapi import FastAPI, HTTPException, Query
    from fastapi.responses import StreamingResponse
    from pydantic import BaseModel

    class CreateBody(BaseModel):
        seed: int = 0
        truth: list[dict] | None = None

    class AnswerBody(BaseModel):
        seq: int
        answer: bool

    app = FastAPI(title="mintplan elicitation service")
    sessions: dict[str, Session] = {}

    def get_session(session_id: str) -> Session:
        expired = [
            sid
            for sid, s in sessions.items()
            if time.monotonic() - s.last_access > SESSION_IDLE_TIMEOUT
        ]
        for sid in expired:
            del sessions[sid]
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail="unknown session")
        session.touch()
        return session

    @app.get("/grid")
    def grid():
        return _grid_json(spec)

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateBody):
        if body.truth is not None:
            truth = Descriptor(
                tuple(
                    ObjectDescriptor(o["kind"], o["subtype"], float(o["magnitude"]))
                    for o in body.truth
                )
            )
        else:
            truth = sample_descriptor(
                KnowledgeGap.maximal(spec.n_objects), np.random.default_rng([body.seed, 17])
            )
        engine = EpisodeEngine(
            spec, model, truth, config, np.random.default_rng([body.seed, 29])
        )
        session = Session(id=uuid.uuid4().hex, engine=engine)
        session.events.append(
            engine._event(
                "state",
                {
                    "cell": list(engine.state.agent_cell),
                    "steps": 0,
                    "consumed": list(engine.state.consumed),
                    "total_reward": 0.0,
                    "gap": elicitation._gap_to_json(engine.gap),
                    "done": False,
                },
            )
        )
        sessions[session.id] = session
        return {
            "id": session.id,
            "phase": engine.phase,
            "seq": engine.seq,
            "truth": [
                {"kind": o.kind, "subtype": o.subtype, "magnitude": o.magnitude}
                for o in truth.objects
            ],
        }

    @app.post("/sessions/{session_id}/advance")
    def advance(session_id: str):
        session = get_session(session_id)
        with session.lock:
            events = session.engine.advance()
            session.events.extend(events)
            return {"phase": session.engine.phase, "seq": session.engine.seq, "events": events}

    @app.post("/sessions/{session_id}/answer")
    def answer(session_id: str, body: AnswerBody):
        session = get_session(session_id)
        with session.lock:
            if body.seq in session.answered:
                if session.answered[body.seq] != body.answer:
                    raise HTTPException(
                        status_code=409, detail="question already answered differently"
                    )
                return {
                    "phase": session.engine.phase,
                    "seq": session.engine.seq,
                    "events": [],
                    "duplicate": True,
                }
            if session.engine.pending is None or session.pending_seq != body.seq:
                raise HTTPException(status_code=409, detail="no such pending question")
            try:
                events = session.engine.submit_answer(body.answer)
            except InvalidAnswer as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            session.answered[body.seq] = body.answer
            session.events.extend(events)
            return {"phase": session.engine.phase, "seq": session.engine.seq, "events": events}

    @app.get("/sessions/{session_id}/state")
    def state(session_id: str):
        session = get_session(session_id)
        with session.lock:
            return session.snapshot()

    @app.get("/sessions/{session_id}/events")
    async def events(session_id: str, from_: int = Query(0, alias="from")):
        session = get_session(session_id)
        start = from_

        async def stream():
            cursor = start
            while True:
                with session.lock:
                    new = [e for e in session.events if e["seq"] > cursor]
                    done = session.engine.done and session.pending_seq is None
                for event in new:
                    cursor = event["seq"]
                    yield f"data: {json.dumps(event, sort_keys=True)}\n\n"
                if done and not new:
                    return
                if not new:
                    await asyncio.sleep(0.05)

        return StreamingResponse(stream(), media_type="text/event-stream")

    app.state.sessions = sessions
    return app


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _render_grid(spec: GridSpec, engine: EpisodeEngine) -> str:
    rows = []
    for r in range(spec.height):
        row = []
        for c in range(spec.width):
            cell = (r, c)
            if cell == engine.state.agent_cell:
                row.append("A")
            elif cell == spec.goal:
                row.append("G")
            elif cell in spec.walls:
                row.append("#")
            elif cell in spec.uncertain_cells:
                row.append(str(spec.uncertain_cells.index(cell) + 1))
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows)


def _cmd_train(args) -> int:
    spec = GridSpec.from_file(args.grid)
    hyper = Hyper(
        episodes=args.episodes,
        alpha=args.alpha,
        epsilon=args.epsilon,
        t_d=args.t_d,
    )
    model, report = train(spec, KnowledgeGap.maximal(spec.n_objects), hyper, args.seed)
    harness.save_model(model, args.out)
    curve = report.mean_return_curve(10)
    print(f"trained {report.episodes} episodes ({report.steps} steps) -> {args.out}")
    print("mean return curve:", " ".join(f"{x:.2f}" for x in curve))
    return 0


def _cmd_eval(args) -> int:
    config = harness.load_config(args.config)
    report = harness.run_benchmark(config, log=print if args.verbose else None)
    print(report.to_table_text())
    print(f"reports written under {config.out_dir}")
    return 0


def _cmd_verify_theory(args) -> int:
    reports = theory.certification_suite(
        seed=args.seed,
        n_lipschitz=args.pairs,
        n_return=args.return_triples,
    )
    lines = [r.to_text() for r in reports]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0 if all(r.passed for r in reports) else 1


def _cmd_interactive(args) -> int:
    spec = GridSpec.from_file(args.grid)
    model = harness.load_model(args.model)
    config = EpisodeConfig(delta=args.delta, k=args.k, t_d=model.hyper.t_d)
    truth = sample_descriptor(
        KnowledgeGap.maximal(spec.n_objects), np.random.default_rng([args.seed, 17])
    )
    engine = EpisodeEngine(spec, model, truth, config, np.random.default_rng([args.seed, 29]))
    print("ground truth:", [(o.kind, o.subtype, round(o.magnitude, 3)) for o in truth.objects])
    while not engine.done:
        engine.advance()
        print(_render_grid(spec, engine))
        print(f"reward so far: {engine.total_reward:.2f}")
        if engine.pending is not None:
            _, text, _ = engine.pending
            while True:
                raw = input(f"Q: {text} [y/n] ").strip().lower()
                if raw in ("y", "yes", "n", "no"):
                    break
                print("please answer y or n")
            engine.submit_answer(raw.startswith("y"))
    result = engine.result()
    print(f"episode over: success={result.success} reward={result.total_reward:.2f}")
    return 0 if result.success else 1


def _cmd_serve(args) -> int:
    import uvicorn

    spec = GridSpec.from_file(args.grid)
    model = harness.load_model(args.model)
    config = EpisodeConfig(delta=args.delta, k=args.k, t_d=model.hyper.t_d)
    app = create_app(spec, model, config)
    uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mintplan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a quantile model on a grid family")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--t-d", type=int, default=5, dest="t_d")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="run a benchmark config")
    p.add_argument("--config", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify-theory", help="run the certification battery")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs", type=int, default=60)
    p.add_argument("--return-triples", type=int, default=20, dest="return_triples")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_verify_theory)

    p = sub.add_parser("interactive", help="play one episode answering queries")
    p.add_argument("--grid", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=_cmd_interactive)

    p = sub.add_parser("serve", help="host the elicitation HTTP service")
    p.add_argument("--grid", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=_cmd_serve)
    return parser


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # surface a one-line diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return cli_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
