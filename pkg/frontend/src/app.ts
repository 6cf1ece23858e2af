// Browser entry point: renders the process table, a per-process source
// view with breakpoint markers and the stop cursor, inspect/patch forms,
// and the live event log.  All state comes from the hub session.

import { SocketLike, UiSession, ServiceFailure } from './session.js';

const $ = (id: string) => document.getElementById(id) as HTMLElement;

let session: UiSession | null = null;
let selectedTid: number | null = null;
let sourceCache = new Map<number, { file: string; lines: string[] }>();
let breakLines = new Map<number, Set<number>>();

function toast(text: string): void {
  const box = $('toast');
  box.textContent = text;
  box.classList.add('visible');
  setTimeout(() => box.classList.remove('visible'), 2500);
}

function renderProcesses(): void {
  if (!session) return;
  const tbody = $('process-rows');
  tbody.innerHTML = '';
  for (const row of session.processes) {
    const cursor = session.cursors.get(row.tid);
    const tr = document.createElement('tr');
    tr.className = row.tid === selectedTid ? 'selected' : '';
    tr.innerHTML =
      `<td>${row.tid}</td><td>${row.program ?? ''}</td><td>${row.att}</td>` +
      `<td>${row.machine}</td>` +
      `<td>${cursor ? cursor.state + (cursor.line !== null ? ' @' + cursor.line : '') : ''}</td>`;
    tr.onclick = () => void selectProcess(row.tid);
    tbody.appendChild(tr);
  }
}

async function selectProcess(tid: number): Promise<void> {
  if (!session) return;
  selectedTid = tid;
  $('selected-label').textContent = `process ${tid}`;
  if (!sourceCache.has(tid)) {
    try {
      const { source, file } = await session.readSource(tid);
      sourceCache.set(tid, { file, lines: source.split('\n') });
    } catch (err) {
      toast(String(err));
      return;
    }
  }
  renderProcesses();
  renderSource();
}

function renderSource(): void {
  if (!session || selectedTid === null) return;
  const cached = sourceCache.get(selectedTid);
  if (!cached) return;
  $('source-file').textContent = cached.file;
  const cursor = session.cursors.get(selectedTid);
  const marks = breakLines.get(selectedTid) ?? new Set<number>();
  const pane = $('source-pane');
  pane.innerHTML = '';
  cached.lines.forEach((text, index) => {
    const lineNo = index + 1;
    const div = document.createElement('div');
    div.className = 'src-line';
    if (cursor && cursor.line === lineNo) div.classList.add('cursor');
    const marker = marks.has(lineNo) ? '●' : ' ';
    div.textContent = `${marker}${String(lineNo).padStart(3)} ${text}`;
    div.onclick = () => void toggleBreak(lineNo);
    pane.appendChild(div);
  });
}

async function toggleBreak(line: number): Promise<void> {
  if (!session || selectedTid === null) return;
  try {
    await session.setBreakpoint(selectedTid, line, 'before');
    if (!breakLines.has(selectedTid)) breakLines.set(selectedTid, new Set());
    breakLines.get(selectedTid)!.add(line);
    renderSource();
  } catch (err) {
    toast(String(err));
  }
}

function renderLog(): void {
  if (!session) return;
  const pane = $('event-log');
  pane.textContent = session.eventLog.slice(-200).join('\n');
  pane.scrollTop = pane.scrollHeight;
}

function wireForms(): void {
  $('btn-continue').onclick = () => withSelected((tid) => session!.resume(tid));
  $('btn-step').onclick = () => withSelected((tid) => session!.singleStep(tid));
  $('btn-evaluate').onclick = () =>
    withSelected(async (tid) => {
      const name = ($('eval-name') as HTMLInputElement).value || 'value';
      const result = await session!.evaluate(tid, name);
      $('eval-result').textContent =
        `$${result.ordinal} = ${result.value}` +
        (result.initialized ? '' : ' (uninitialized)');
    });
  $('btn-set').onclick = () =>
    withSelected(async (tid) => {
      const name = ($('set-name') as HTMLInputElement).value;
      const value = parseInt(($('set-value') as HTMLInputElement).value, 10);
      await session!.setVariable(tid, name, value);
      toast(`set ${name}=${value}`);
    });
}

function withSelected(action: (tid: number) => Promise<unknown>): void {
  if (!session || selectedTid === null) {
    toast('select a process first');
    return;
  }
  action(selectedTid).catch((err) => {
    toast(err instanceof ServiceFailure ? err.message : String(err));
  });
}

async function boot(): Promise<void> {
  const url = `ws://${location.host}/ws`;
  try {
    session = await UiSession.connect(
      url, (u) => new WebSocket(u) as unknown as SocketLike);
  } catch (err) {
    $('banner').textContent = `connection failed: ${err}`;
    $('banner').classList.add('error');
    ($('btn-retry') as HTMLButtonElement).hidden = false;
    return;
  }
  $('banner').textContent = `connected as ${session.clientId}`;
  session.onChange(() => {
    renderProcesses();
    renderSource();
    renderLog();
  });
  wireForms();
  await session.refreshProcesses();
  if (session.processes.length > 0) {
    await selectProcess(session.processes[0].tid);
  }
}

($('btn-retry') as HTMLButtonElement).onclick = () => {
  ($('btn-retry') as HTMLButtonElement).hidden = true;
  void boot();
};

void boot();
