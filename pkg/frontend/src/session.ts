// Hub client session over the gateway WebSocket.
//
// The session holds no debugging state of its own: the process table,
// per-process cursors, and the event log are all rebuilt from hub
// replies and events, rendered strictly in seq order.

import {
  Envelope,
  EventRecord,
  ReplyBody,
  decodeEnvelope,
  encodeEnvelope,
  isEventRecord,
} from './protocol.js';

export interface ProcessRow {
  tid: number;
  att: string;
  tp_pid: number;
  lld_pid: number;
  l_tid: number;
  machine: string;
  program?: string;
}

export interface Cursor {
  state: string;
  line: number | null;
}

// browser WebSocket and the `ws` package both fit this shape
export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: ((ev?: unknown) => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
  onclose: ((ev?: unknown) => void) | null;
  onerror: ((ev?: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

interface PendingReply {
  resolve: (payload: unknown) => void;
  reject: (err: Error) => void;
}

export class ServiceFailure extends Error {
  constructor(public code: string, detail = '') {
    super(detail ? `${code}: ${detail}` : code);
  }
}

export class UiSession {
  clientId = '';
  processes: ProcessRow[] = [];
  cursors = new Map<number, Cursor>();
  eventLog: string[] = [];
  lastSeq = 0;
  seqViolations = 0;

  private socket: SocketLike | null = null;
  private nextRid = 1;
  private pending = new Map<number, PendingReply>();
  private helloWaiter: PendingReply | null = null;
  private changeListeners: Array<() => void> = [];

  static connect(url: string, factory: SocketFactory): Promise<UiSession> {
    const session = new UiSession();
    return session.open(url, factory);
  }

  private open(url: string, factory: SocketFactory): Promise<UiSession> {
    return new Promise((resolve, reject) => {
      const socket = factory(url);
      this.socket = socket;
      const fail = (err: Error) => {
        if (this.helloWaiter) {
          this.helloWaiter = null;
          reject(err);
        }
      };
      socket.onopen = () => {
        this.helloWaiter = {
          resolve: () => resolve(this),
          reject,
        };
        socket.send(
          encodeEnvelope({ kind: 'hello', args: ['tool', 'event_async'] }),
        );
      };
      socket.onmessage = (ev) => this.onFrame(String(ev.data));
      socket.onerror = () => fail(new Error(`cannot reach ${url}`));
      socket.onclose = () => {
        fail(new Error('connection closed'));
        for (const waiter of this.pending.values()) {
          waiter.reject(new Error('connection closed'));
        }
        this.pending.clear();
      };
    });
  }

  close(): void {
    this.socket?.close();
  }

  onChange(listener: () => void): void {
    this.changeListeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.changeListeners) listener();
  }

  private onFrame(text: string): void {
    let env: Envelope;
    try {
      env = decodeEnvelope(text);
    } catch {
      return;
    }
    if (env.kind === 'reply') {
      // only the hello handshake is answered with a reply envelope
      if (this.helloWaiter) {
        const payload = env.payload as { client_id?: string } | undefined;
        this.clientId = payload?.client_id ?? '';
        const waiter = this.helloWaiter;
        this.helloWaiter = null;
        waiter.resolve(undefined);
      }
      return;
    }
    if (env.kind === 'event' && isEventRecord(env.payload)) {
      this.onEvent(env.payload);
    }
  }

  private onEvent(record: EventRecord): void {
    if (record.seq <= this.lastSeq) {
      this.seqViolations += 1;
    }
    this.lastSeq = Math.max(this.lastSeq, record.seq);
    const body = record.body ?? {};
    switch (record.kind) {
      case 'Reply': {
        const reply = body as unknown as ReplyBody;
        const waiter = this.pending.get(reply.request_id);
        if (waiter) {
          this.pending.delete(reply.request_id);
          if (reply.status === 'ok') {
            waiter.resolve(reply.payload);
          } else {
            const detail =
              typeof reply.payload === 'object' && reply.payload !== null
                ? String((reply.payload as { error?: string }).error ?? '')
                : '';
            waiter.reject(new ServiceFailure(reply.status, detail));
          }
        }
        break;
      }
      case 'Stopped':
      case 'Exited': {
        const tid = Number(body.tid);
        const state =
          record.kind === 'Exited' ? 'exited' : String(body.state ?? 'stopped');
        const line = body.line === undefined ? null : Number(body.line);
        this.cursors.set(tid, { state, line });
        this.eventLog.push(
          `#${record.seq} ${record.kind} tid=${tid} ${state}` +
            (line === null ? '' : ` line=${line}`),
        );
        break;
      }
      case 'Spawned': {
        this.eventLog.push(
          `#${record.seq} Spawned tid=${body.tid} program=${body.program}`,
        );
        void this.refreshProcesses().catch(() => undefined);
        break;
      }
      case 'Output': {
        this.eventLog.push(`#${record.seq} Output tid=${body.tid}: ${body.text}`);
        break;
      }
      case 'PeerRequest': {
        this.eventLog.push(
          `#${record.seq} PeerRequest ${body.client} -> ${body.service}` +
            (body.tid === null || body.tid === undefined ? '' : ` tid=${body.tid}`),
        );
        break;
      }
    }
    this.notify();
  }

  submit(service: string, args: unknown[], timeoutMs = 10000): Promise<unknown> {
    const socket = this.socket;
    if (!socket) return Promise.reject(new Error('not connected'));
    const rid = this.nextRid++;
    const promise = new Promise<unknown>((resolve, reject) => {
      this.pending.set(rid, { resolve, reject });
      setTimeout(() => {
        if (this.pending.delete(rid)) {
          reject(new ServiceFailure('timeout', `rid ${rid}`));
        }
      }, timeoutMs);
    });
    socket.send(
      encodeEnvelope({
        kind: 'request',
        client: this.clientId,
        rid,
        service,
        args,
      }),
    );
    return promise;
  }

  async refreshProcesses(): Promise<ProcessRow[]> {
    const payload = (await this.submit('list_tids', [])) as {
      records: ProcessRow[];
    };
    this.processes = payload.records;
    this.notify();
    return this.processes;
  }

  async evaluate(tid: number, name: string) {
    return (await this.submit('evaluate', [tid, name])) as {
      ordinal: number;
      initialized: boolean;
      value: number;
    };
  }

  async setVariable(tid: number, name: string, value: number): Promise<void> {
    await this.submit('set_variable', [tid, name, value]);
  }

  async setBreakpoint(tid: number, line: number, when: 'before' | 'after') {
    return (await this.submit('break_set', [tid, line, when, false])) as {
      id: number;
    };
  }

  async resume(tid: number): Promise<void> {
    await this.submit('resume', [tid]);
  }

  async singleStep(tid: number): Promise<void> {
    await this.submit('single_step', [tid]);
  }

  async readSource(tid: number) {
    return (await this.submit('read_source', [tid])) as {
      source: string;
      file: string;
    };
  }
}
