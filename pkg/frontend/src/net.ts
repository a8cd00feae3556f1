// WebSocket client with automatic reconnect and exponential backoff.
// Incoming messages are buffered and drained once per animation frame.

import { ServerMessage, parseServerMessage } from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: string }) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

const BACKOFF_BASE_MS = 500;
const BACKOFF_MAX_MS = 8000;

export class TeleopClient {
  url: string;
  private factory: SocketFactory;
  private socket: SocketLike | null = null;
  private inbox: ServerMessage[] = [];
  private pending: string | null = null;
  private retries = 0;
  private timer: ReturnType<typeof setTimeout> | null = null;
  connected = false;
  onStatus: (status: "connecting" | "open" | "closed") => void = () => {};

  constructor(url: string, factory?: SocketFactory) {
    this.url = url;
    this.factory =
      factory ?? ((u: string) => new WebSocket(u) as unknown as SocketLike);
  }

  backoffMs(): number {
    return Math.min(BACKOFF_BASE_MS * 2 ** this.retries, BACKOFF_MAX_MS);
  }

  connect(): void {
    this.onStatus("connecting");
    const ws = this.factory(this.url);
    this.socket = ws;
    ws.onopen = () => {
      this.connected = true;
      this.retries = 0;
      this.onStatus("open");
      if (this.pending !== null) {
        ws.send(this.pending);
        this.pending = null;
      }
    };
    ws.onclose = () => {
      this.connected = false;
      this.onStatus("closed");
      const delay = this.backoffMs();
      this.retries += 1;
      this.timer = setTimeout(() => this.connect(), delay);
    };
    ws.onmessage = (ev) => {
      const msg = parseServerMessage(ev.data);
      if (msg !== null) this.inbox.push(msg);
    };
  }

  // Sends now if connected; otherwise keeps only the newest queued command so
  // the draft survives a reconnect without replaying stale intents.
  send(payload: string): void {
    if (this.connected && this.socket) {
      this.socket.send(payload);
    } else {
      this.pending = payload;
    }
  }

  drain(): ServerMessage[] {
    const out = this.inbox;
    this.inbox = [];
    return out;
  }

  stop(): void {
    if (this.timer !== null) clearTimeout(this.timer);
    this.socket?.close();
  }
}
