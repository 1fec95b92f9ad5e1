import { describe, expect, it } from "vitest";

import { ProgressStream, parseSseChunk, type StreamEvent } from "../src/stream.js";

function sseBody(events: object[]): ReadableStream<Uint8Array> {
  const enc = new TextEncoder();
  return new ReadableStream({
    start(controller) {
      for (const e of events) controller.enqueue(enc.encode(`data: ${JSON.stringify(e)}\n\n`));
      controller.enqueue(enc.encode(": keep-alive\n\n"));
      controller.close();
    },
  });
}

describe("SSE parsing", () => {
  it("extracts data payloads and ignores comments", () => {
    const chunk = 'data: {"a":1}\n\n: keep-alive\n\ndata: {"b":2}\n\n';
    expect([...parseSseChunk(chunk)]).toEqual(['{"a":1}', '{"b":2}']);
  });

  it("delivers events in order and reports clean close", async () => {
    const events = [
      { type: "state", state: "generating" },
      { type: "progress", phase: "generation", step: 1, total: 3 },
      { type: "progress", phase: "generation", step: 2, total: 3 },
    ];
    const seen: StreamEvent[] = [];
    let closed = false;
    const stream = new ProgressStream(
      "http://unused/stream",
      {
        onEvent: (e) => seen.push(e),
        onClose: () => (closed = true),
      },
      async () => new Response(sseBody(events), { status: 200 }),
    );
    stream.start();
    await new Promise((r) => setTimeout(r, 50));
    expect(seen).toEqual(events);
    expect(closed).toBe(true);
  });

  it("reconnects with backoff after a drop and flags stale frames", async () => {
    let calls = 0;
    const staleFlags: boolean[] = [];
    const seen: StreamEvent[] = [];
    const stream = new ProgressStream(
      "http://unused/stream",
      {
        onEvent: (e) => seen.push(e),
        onStale: (s) => staleFlags.push(s),
      },
      async () => {
        calls += 1;
        if (calls === 1) return new Response(null, { status: 503 });
        return new Response(sseBody([{ type: "state", state: "previewable" }]), { status: 200 });
      },
    );
    stream.start();
    await new Promise((r) => setTimeout(r, 600));
    expect(calls).toBeGreaterThanOrEqual(2);
    expect(staleFlags[0]).toBe(true); // dropped
    expect(staleFlags).toContain(false); // reconnected
    expect(seen.length).toBe(1);
  });
});
