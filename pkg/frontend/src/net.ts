// WebSocket client: one connection, exponential reconnect backoff, pending
// command replies matched by request id.

import { Command, Reply, isEvent, isReply, makeCommand } from "./protocol.js";

export interface NetCallbacks {
  onEvent: (msg: unknown) => void;
  onOpen?: () => void;
  onClose?: () => void;
}

const BACKOFF_BASE_MS = 250;
const BACKOFF_MAX_MS = 8000;

export class ServiceConnection {
  private ws: WebSocket | null = null;
  private pending = new Map<string, (reply: Reply) => void>();
  private backoff = BACKOFF_BASE_MS;
  private closed = false;

  constructor(
    private url: string,
    private callbacks: NetCallbacks,
    private wsFactory: (url: string) => WebSocket = (u) => new WebSocket(u),
  ) {}

  connect(): void {
    if (this.closed) return;
    const ws = this.wsFactory(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.backoff = BACKOFF_BASE_MS;
      this.callbacks.onOpen?.();
    };
    ws.onmessage = (ev: MessageEvent) => {
      let msg: unknown;
      try {
        msg = JSON.parse(String(ev.data));
      } catch {
        console.warn("malformed frame ignored");
        return;
      }
      if (isReply(msg)) {
        const waiter = this.pending.get(String(msg.id));
        if (waiter) {
          this.pending.delete(String(msg.id));
          waiter(msg);
          return;
        }
      }
      if (isEvent(msg)) this.callbacks.onEvent(msg);
    };
    ws.onclose = () => {
      this.callbacks.onClose?.();
      this.pending.forEach((waiter) =>
        waiter({ v: 1, id: "", ok: false, error: "connection lost" }),
      );
      this.pending.clear();
      if (!this.closed) {
        setTimeout(() => this.connect(), this.backoff);
        this.backoff = Math.min(this.backoff * 2, BACKOFF_MAX_MS);
      }
    };
    ws.onerror = () => ws.close();
  }

  command(cmd: string, args: Record<string, unknown> = {}): Promise<Reply> {
    const message: Command = makeCommand(cmd, args);
    return new Promise((resolve) => {
      if (!this.ws || this.ws.readyState !== 1) {
        resolve({ v: 1, id: message.id, ok: false, error: "not connected" });
        return;
      }
      this.pending.set(message.id, resolve);
      this.ws.send(JSON.stringify(message));
    });
  }

  close(): void {
    this.closed = true;
    this.ws?.close();
  }
}
