import { Api } from './api';
import { Console } from './app';

const KEYBOARD_POLL_MS = 2_000;

export function boot(doc: Document, baseUrl = ''): Console {
  const ui = new Console(doc, new Api(baseUrl));
  void ui.refreshKeyboards();
  void ui.refreshNodes();
  setInterval(() => {
    void ui.refreshKeyboards();
    void ui.refreshNodes();
  }, KEYBOARD_POLL_MS);
  return ui;
}

declare global {
  interface Window {
    keyjackConsole?: Console;
  }
}

if (typeof window !== 'undefined' && typeof document !== 'undefined') {
  window.keyjackConsole = boot(document);
}
