/**
 * Server-push progress channel: parses the SSE byte stream with fetch so
 * it works in both the browser and node tests, and reconnects with
 * exponential backoff after drops, flagging stale frames meanwhile.
 */

export interface ProgressEvent {
  type: "progress";
  phase: "generation" | "edit" | "reconstruction";
  step: number;
  total: number;
  thumbnails?: string[]; // base64 PNGs
}

export interface StateEvent {
  type: "state";
  state: string;
  error?: string;
}

export type StreamEvent = ProgressEvent | StateEvent;

export interface StreamCallbacks {
  onEvent?: (event: StreamEvent) => void;
  onStale?: (stale: boolean) => void;
  onClose?: () => void;
}

/** Split SSE framing into data payloads; exported for tests. */
export function* parseSseChunk(buffer: string): Generator<string> {
  for (const frame of buffer.split("\n\n")) {
    for (const line of frame.split("\n")) {
      if (line.startsWith("data: ")) yield line.slice(6);
    }
  }
}

export class ProgressStream {
  private stopped = false;
  private backoffMs = 250;

  constructor(
    private url: string,
    private callbacks: StreamCallbacks,
    private fetchFn: typeof fetch = fetch,
  ) {}

  start(): void {
    void this.loop();
  }

  stop(): void {
    this.stopped = true;
  }

  private async loop(): Promise<void> {
    while (!this.stopped) {
      try {
        const resp = await this.fetchFn(this.url);
        if (!resp.ok || !resp.body) throw new Error(`stream ${resp.status}`);
        this.backoffMs = 250;
        this.callbacks.onStale?.(false);
        await this.consume(resp.body);
        if (this.stopped) break;
        this.callbacks.onClose?.();
        return; // clean end of stream
      } catch {
        if (this.stopped) break;
        this.callbacks.onStale?.(true);
        await new Promise((r) => setTimeout(r, this.backoffMs));
        this.backoffMs = Math.min(this.backoffMs * 2, 5_000);
      }
    }
  }

  private async consume(body: ReadableStream<Uint8Array>): Promise<void> {
    const reader = body.getReader();
    const decoder = new TextDecoder();
    let pending = "";
    for (;;) {
      const { done, value } = await reader.read();
      if (done || this.stopped) break;
      pending += decoder.decode(value, { stream: true });
      const frames = pending.split("\n\n");
      pending = frames.pop() ?? "";
      for (const frame of frames) {
        for (const payload of parseSseChunk(frame + "\n\n")) {
          try {
            this.callbacks.onEvent?.(JSON.parse(payload) as StreamEvent);
          } catch {
            /* tolerate malformed keep-alives */
          }
        }
      }
    }
  }
}
