// Wire protocol: one JSON envelope per WebSocket text frame, same schema
// as the hub's socket protocol.

export type EnvelopeKind = 'hello' | 'register' | 'request' | 'reply' | 'event';

export interface Envelope {
  kind: EnvelopeKind;
  client?: string;
  rid?: number;
  service?: string;
  args?: unknown[];
  status?: string;
  payload?: unknown;
}

export interface EventRecord {
  seq: number;
  kind: 'Reply' | 'Stopped' | 'Exited' | 'Spawned' | 'Output' | 'PeerRequest';
  body: Record<string, unknown>;
}

export interface ReplyBody {
  request_id: number;
  status: string;
  payload: unknown;
}

export function encodeEnvelope(env: Envelope): string {
  return JSON.stringify(env);
}

export function decodeEnvelope(text: string): Envelope {
  const obj = JSON.parse(text);
  if (typeof obj !== 'object' || obj === null || typeof obj.kind !== 'string') {
    throw new Error(`bad envelope: ${text}`);
  }
  return obj as Envelope;
}

export function isEventRecord(payload: unknown): payload is EventRecord {
  return (
    typeof payload === 'object' &&
    payload !== null &&
    typeof (payload as EventRecord).seq === 'number' &&
    typeof (payload as EventRecord).kind === 'string'
  );
}
