// View-model state and pure presentation helpers.

export type TabName = 'search' | 'capture' | 'injection' | 'hacking';

export const TABS: TabName[] = ['search', 'capture', 'injection', 'hacking'];

export interface ScriptRunState {
  name: string;
  commandIds: number[];
  stepStatus: string[]; // parallel to commandIds
}

export interface ConsoleState {
  selectedMac: string | null;
  activeTab: TabName;
  captureFrom: number | undefined;
  captureTo: number | undefined;
  scriptRuns: ScriptRunState[];
  serverReachable: boolean;
}

export function initialState(): ConsoleState {
  return {
    selectedMac: null,
    activeTab: 'capture',
    captureFrom: undefined,
    captureTo: undefined,
    scriptRuns: [],
    serverReachable: true,
  };
}

export function formatMicros(t: number): string {
  // simulation timestamps are plain microsecond counters; wall timestamps
  // are epoch microseconds — render both readably
  if (t > 1_000_000_000_000_000) {
    return new Date(t / 1000).toISOString();
  }
  return (t / 1_000_000).toFixed(3) + 's';
}

export function statusClass(status: string): string {
  switch (status) {
    case 'done':
      return 'badge ok';
    case 'failed':
      return 'badge bad';
    case 'running':
      return 'badge busy';
    default:
      return 'badge';
  }
}

export function isTerminal(status: string): boolean {
  return status === 'done' || status === 'failed';
}
