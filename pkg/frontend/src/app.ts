// The operator console: keyboard list plus the four per-keyboard tabs.
// Everything displayed is a direct projection of API responses; the only
// mutations go through the documented POST endpoints.

import { Api, CommandView, KeyboardRow, ScriptView } from './api';
import {
  ConsoleState,
  TABS,
  TabName,
  formatMicros,
  initialState,
  isTerminal,
  statusClass,
} from './state';

const COMMAND_POLL_MS = 500;

export class Console {
  readonly state: ConsoleState = initialState();
  private keyboardPollInFlight = false;

  constructor(private doc: Document, private api: Api) {
    for (const tab of TABS) {
      this.el(`tab-btn-${tab}`).addEventListener('click', () => this.showTab(tab));
    }
    this.el('search-run').addEventListener('click', () => void this.runSearch());
    this.el('capture-refresh').addEventListener('click', () => void this.loadCaptures());
    this.el('inject-send').addEventListener('click', () => void this.sendInjection());
  }

  private el<T extends HTMLElement = HTMLElement>(id: string): T {
    const found = this.doc.getElementById(id);
    if (!found) throw new Error(`missing element #${id}`);
    return found as T;
  }

  private input(id: string): HTMLInputElement {
    return this.el<HTMLInputElement>(id);
  }

  private setBanner(reachable: boolean): void {
    this.state.serverReachable = reachable;
    this.el('banner').classList.toggle('hidden', reachable);
    this.el('keyboard-list').classList.toggle('stale', !reachable);
  }

  // -- keyboard list --------------------------------------------------------

  async refreshKeyboards(): Promise<void> {
    if (this.keyboardPollInFlight) return; // coalesce overlapping polls
    this.keyboardPollInFlight = true;
    try {
      const rows = await this.api.keyboards();
      this.setBanner(true);
      this.renderKeyboards(rows);
    } catch {
      this.setBanner(false);
    } finally {
      this.keyboardPollInFlight = false;
    }
  }

  private renderKeyboards(rows: KeyboardRow[]): void {
    const list = this.el('keyboard-list');
    list.textContent = '';
    const sorted = [...rows].sort((a, b) => b.last_seen - a.last_seen);
    for (const row of sorted) {
      const item = this.doc.createElement('li');
      item.dataset.mac = row.mac;
      const button = this.doc.createElement('button');
      button.className = 'keyboard-row' + (row.mac === this.state.selectedMac ? ' selected' : '');
      button.textContent = `${row.mac} · ch ${row.channels.join('/')} · ${row.nodes.join(',')}`;
      const seen = this.doc.createElement('span');
      seen.className = 'seen';
      seen.textContent = `last seen ${formatMicros(row.last_seen)} · ${row.records} records`;
      button.appendChild(seen);
      button.addEventListener('click', () => void this.selectKeyboard(row.mac));
      item.appendChild(button);
      list.appendChild(item);
    }
    this.el('keyboard-empty').classList.toggle('hidden', rows.length > 0);
  }

  async refreshNodes(): Promise<void> {
    try {
      const nodes = await this.api.nodes();
      const target = this.el('node-list');
      target.textContent = '';
      for (const node of nodes) {
        const item = this.doc.createElement('li');
        item.textContent = `${node.node_id} @ ${node.location || 'unknown'}`;
        target.appendChild(item);
      }
    } catch {
      // banner already handled by the keyboard poll
    }
  }

  async selectKeyboard(mac: string): Promise<void> {
    this.state.selectedMac = mac;
    this.el('detail').classList.remove('hidden');
    this.el('detail-mac').textContent = mac;
    await this.showTab(this.state.activeTab);
    await this.refreshKeyboards();
  }

  // -- tabs -----------------------------------------------------------------

  async showTab(tab: TabName): Promise<void> {
    this.state.activeTab = tab;
    for (const name of TABS) {
      this.el(`tab-${name}`).classList.toggle('hidden', name !== tab);
      this.el(`tab-btn-${name}`).classList.toggle('active', name === tab);
    }
    if (tab === 'capture') await this.loadCaptures();
    if (tab === 'hacking') await this.loadScripts();
    if (tab === 'injection') await this.refreshCommands();
  }

  // -- search ---------------------------------------------------------------

  async runSearch(): Promise<void> {
    const pattern = this.input('search-query').value;
    const results = this.el('search-results');
    results.textContent = '';
    if (!pattern) {
      results.textContent = 'enter a search term';
      return;
    }
    try {
      const { matches } = await this.api.search(pattern);
      const mine = matches.filter((m) => m.mac === this.state.selectedMac);
      if (mine.length === 0) {
        results.textContent = 'no matches';
        return;
      }
      for (const match of mine) {
        const row = this.doc.createElement('div');
        row.className = 'search-match';
        row.textContent = `${formatMicros(match.t)}  …${match.context}…`;
        results.appendChild(row);
      }
    } catch (err) {
      results.textContent = `search failed: ${(err as Error).message}`;
    }
  }

  // -- capture --------------------------------------------------------------

  async loadCaptures(): Promise<void> {
    const mac = this.state.selectedMac;
    if (!mac) return;
    const fromRaw = this.input('capture-from').value;
    const toRaw = this.input('capture-to').value;
    this.state.captureFrom = fromRaw ? Number(fromRaw) : undefined;
    this.state.captureTo = toRaw ? Number(toRaw) : undefined;
    const table = this.el('capture-rows');
    const textView = this.el('capture-text');
    try {
      const data = await this.api.captures(mac, this.state.captureFrom, this.state.captureTo);
      textView.textContent = data.text;
      table.textContent = '';
      for (const record of data.records) {
        const tr = this.doc.createElement('tr');
        const kind = record.packet_type === '78' ? 'key' : 'idle';
        for (const cell of [
          formatMicros(record.t),
          kind,
          record.char ?? `0x${record.hid}`,
          record.node_id,
          String(record.channel),
        ]) {
          const td = this.doc.createElement('td');
          td.textContent = cell;
          tr.appendChild(td);
        }
        table.appendChild(tr);
      }
      this.el('capture-empty').classList.toggle('hidden', data.records.length > 0);
    } catch (err) {
      textView.textContent = '';
      table.textContent = '';
      this.el('capture-empty').classList.remove('hidden');
      this.el('capture-empty').textContent = `query failed: ${(err as Error).message}`;
    }
  }

  // -- injection ------------------------------------------------------------

  async sendInjection(): Promise<void> {
    const mac = this.state.selectedMac;
    if (!mac) return;
    const text = this.input('inject-text').value;
    const feedback = this.el('inject-feedback');
    if (!text) {
      feedback.textContent = 'nothing to inject';
      return;
    }
    try {
      const { command_id } = await this.api.inject(mac, text);
      feedback.textContent = `command ${command_id} enqueued`;
      this.input('inject-text').value = '';
      await this.refreshCommands();
      void this.pollCommandToTerminal(command_id);
    } catch (err) {
      feedback.textContent = `rejected: ${(err as Error).message}`;
    }
  }

  async refreshCommands(): Promise<void> {
    const mac = this.state.selectedMac;
    if (!mac) return;
    try {
      const commands = await this.api.commandsFor(mac);
      this.renderCommands(commands);
    } catch {
      // transient; next poll will repaint
    }
  }

  private renderCommands(commands: CommandView[]): void {
    const list = this.el('command-list');
    list.textContent = '';
    for (const cmd of [...commands].sort((a, b) => b.command_id - a.command_id)) {
      const item = this.doc.createElement('li');
      item.dataset.commandId = String(cmd.command_id);
      const label = this.doc.createElement('span');
      label.textContent = `#${cmd.command_id} ${JSON.stringify(cmd.text)} `;
      const badge = this.doc.createElement('span');
      badge.className = statusClass(cmd.status);
      badge.textContent = cmd.status + (cmd.reason ? `: ${cmd.reason}` : '');
      item.append(label, badge);
      list.appendChild(item);
    }
  }

  async pollCommandToTerminal(commandId: number, budgetMs = 60_000): Promise<CommandView> {
    const deadline = Date.now() + budgetMs;
    for (;;) {
      const cmd = await this.api.command(commandId);
      await this.refreshCommands();
      if (isTerminal(cmd.status)) return cmd;
      if (Date.now() > deadline) throw new Error(`command ${commandId} still ${cmd.status}`);
      await sleep(COMMAND_POLL_MS);
    }
  }

  // -- hacking --------------------------------------------------------------

  async loadScripts(): Promise<void> {
    const list = this.el('script-list');
    try {
      const scripts = await this.api.scripts();
      list.textContent = '';
      for (const script of scripts) {
        list.appendChild(this.renderScript(script));
      }
      this.el('script-empty').classList.toggle('hidden', scripts.length > 0);
    } catch (err) {
      list.textContent = `could not load scripts: ${(err as Error).message}`;
    }
  }

  private renderScript(script: ScriptView): HTMLElement {
    const item = this.doc.createElement('li');
    item.dataset.script = script.name;
    const title = this.doc.createElement('span');
    title.textContent = `${script.name} (${script.steps.length} steps) `;
    const run = this.doc.createElement('button');
    run.textContent = 'run';
    run.addEventListener('click', () => void this.runScript(script.name));
    item.append(title, run);
    return item;
  }

  async runScript(name: string): Promise<void> {
    const mac = this.state.selectedMac;
    if (!mac) return;
    const runsEl = this.el('script-runs');
    try {
      const { command_ids } = await this.api.runScript(mac, name);
      const run = { name, commandIds: command_ids, stepStatus: command_ids.map(() => 'pending') };
      this.state.scriptRuns.push(run);
      const container = this.doc.createElement('div');
      container.className = 'script-run';
      container.dataset.run = name;
      runsEl.appendChild(container);
      this.renderScriptRun(container, run);
      void this.trackScriptRun(container, run);
    } catch (err) {
      runsEl.textContent = `run failed: ${(err as Error).message}`;
    }
  }

  private renderScriptRun(container: HTMLElement,
                          run: { name: string; commandIds: number[]; stepStatus: string[] }): void {
    container.textContent = '';
    const title = this.doc.createElement('div');
    title.textContent = `${run.name} run`;
    container.appendChild(title);
    run.commandIds.forEach((commandId, i) => {
      const step = this.doc.createElement('div');
      step.className = 'script-step';
      step.dataset.commandId = String(commandId);
      const label = this.doc.createElement('span');
      label.textContent = `step ${i + 1} (command ${commandId}) `;
      const badge = this.doc.createElement('span');
      badge.className = statusClass(run.stepStatus[i]);
      badge.textContent = run.stepStatus[i];
      step.append(label, badge);
      container.appendChild(step);
    });
  }

  private async trackScriptRun(container: HTMLElement,
                               run: { name: string; commandIds: number[]; stepStatus: string[] },
                               budgetMs = 120_000): Promise<void> {
    const deadline = Date.now() + budgetMs;
    while (Date.now() < deadline) {
      const statuses = await Promise.all(run.commandIds.map((id) => this.api.command(id)));
      run.stepStatus = statuses.map((c) => c.status);
      this.renderScriptRun(container, run);
      if (statuses.every((c) => isTerminal(c.status))) return;
      await sleep(COMMAND_POLL_MS);
    }
  }
}

function sleep(ms: number): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, ms));
}
