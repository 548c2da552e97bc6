// Browser bootstrap: wires the session core to the page.

import { TriageApi } from "./api.js";
import { render, ConsoleElements } from "./render.js";
import {
  ConsoleSessionView,
  emptyView,
  startSession,
  submitAnswer,
} from "./session.js";

function elements(): ConsoleElements {
  const get = <T extends HTMLElement>(id: string): T => {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el as T;
  };
  return {
    transcript: get("transcript"),
    question: get("question"),
    badge: get("badge"),
    recommendation: get("recommendation"),
    hpi: get("hpi"),
    banner: get("banner"),
    error: get("error"),
    input: get<HTMLInputElement>("answer"),
    send: get<HTMLButtonElement>("send"),
  };
}

function main(): void {
  const api = new TriageApi(window.location.origin);
  const el = elements();
  let view: ConsoleSessionView = emptyView();

  const update = (next: ConsoleSessionView): void => {
    view = next;
    render(view, el);
  };

  const begin = async (): Promise<void> => {
    update(await startSession(api));
    if (view.state === "error") {
      el.question.textContent = "Could not reach the triage service — retrying in 3s.";
      setTimeout(() => void begin(), 3000);
    }
  };

  const send = async (): Promise<void> => {
    const text = el.input.value;
    const next = await submitAnswer(view, text, api, update);
    if (next.state !== "awaiting_input" || next.error === null) {
      el.input.value = "";
    }
    update(next);
  };

  el.send.addEventListener("click", () => void send());
  el.input.addEventListener("keydown", (event) => {
    if (event.key === "Enter") void send();
  });
  void begin();
}

main();
