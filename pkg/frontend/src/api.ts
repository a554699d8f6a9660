// Typed client for the capture server's operator API.

export interface KeyboardRow {
  mac: string;
  first_seen: number;
  last_seen: number;
  channels: number[];
  nodes: string[];
  records: number;
}

export interface CaptureRecordRow {
  node_id: string;
  channel: number;
  t: number;
  packet_type: string;
  hid: string;
  modifiers: string;
  char: string | null;
  recv_t: number;
}

export interface CapturesResponse {
  mac: string;
  records: CaptureRecordRow[];
  text: string;
}

export interface SearchMatch {
  mac: string;
  t: number;
  context: string;
}

export interface CommandView {
  command_id: number;
  mac: string;
  text: string;
  status: string;
  reason: string | null;
  node_id: string | null;
  created_at: number;
  finished_at: number | null;
}

export interface ScriptStepView {
  delay_us: number;
  text: string;
}

export interface ScriptView {
  name: string;
  steps: ScriptStepView[];
}

export interface NodeRow {
  node_id: string;
  location: string;
  lat: number | null;
  lon: number | null;
  last_report_at: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class Api {
  constructor(private baseUrl: string = '') {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await fetch(this.baseUrl + path, init);
    const body = await resp.text();
    if (!resp.ok) {
      let message = body;
      try {
        message = JSON.parse(body).error ?? body;
      } catch {
        // plain-text error body
      }
      throw new ApiError(resp.status, message);
    }
    return JSON.parse(body) as T;
  }

  keyboards(): Promise<KeyboardRow[]> {
    return this.request('/api/keyboards');
  }

  captures(mac: string, from?: number, to?: number): Promise<CapturesResponse> {
    const params = new URLSearchParams();
    if (from !== undefined) params.set('from', String(from));
    if (to !== undefined) params.set('to', String(to));
    const qs = params.toString();
    return this.request(`/api/keyboards/${mac.toLowerCase()}/captures${qs ? '?' + qs : ''}`);
  }

  search(pattern: string): Promise<{ matches: SearchMatch[] }> {
    return this.request(`/api/search?q=${encodeURIComponent(pattern)}`);
  }

  inject(mac: string, text: string): Promise<{ command_id: number }> {
    return this.request(`/api/keyboards/${mac.toLowerCase()}/inject`, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify({ text }),
    });
  }

  command(id: number): Promise<CommandView> {
    return this.request(`/api/commands/${id}`);
  }

  commandsFor(mac: string): Promise<CommandView[]> {
    return this.request(`/api/keyboards/${mac.toLowerCase()}/commands`);
  }

  scripts(): Promise<ScriptView[]> {
    return this.request('/api/scripts');
  }

  runScript(mac: string, name: string): Promise<{ command_ids: number[] }> {
    return this.request(`/api/keyboards/${mac.toLowerCase()}/scripts/${name}/run`, {
      method: 'POST',
      body: '',
    });
  }

  nodes(): Promise<NodeRow[]> {
    return this.request('/api/nodes');
  }
}
