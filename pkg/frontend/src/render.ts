// DOM rendering: pure functions from the session view to panel contents.
// Every department name shown here comes verbatim from a server payload.

import { displayDepartment } from "./api.js";
import { ConsoleSessionView, roundBadge } from "./session.js";

export interface ConsoleElements {
  transcript: HTMLElement;
  question: HTMLElement;
  badge: HTMLElement;
  recommendation: HTMLElement;
  hpi: HTMLElement;
  banner: HTMLElement;
  error: HTMLElement;
  input: HTMLInputElement;
  send: HTMLButtonElement;
}

function clear(element: HTMLElement): void {
  while (element.firstChild) element.removeChild(element.firstChild);
}

function line(parent: HTMLElement, className: string, text: string): void {
  const div = document.createElement("div");
  div.className = className;
  div.textContent = text;
  parent.appendChild(div);
}

export function render(view: ConsoleSessionView, el: ConsoleElements): void {
  el.badge.textContent = `Round ${roundBadge(view)}`;

  clear(el.transcript);
  for (const entry of view.transcript) {
    const who = entry.speaker === "patient" ? "You" : "Triage desk";
    line(
      el.transcript,
      `turn ${entry.speaker}${entry.pending ? " pending" : ""}`,
      `${who}: ${entry.text}`,
    );
  }
  el.transcript.scrollTop = el.transcript.scrollHeight;

  el.question.textContent =
    view.state === "awaiting_input" && view.currentQuestion
      ? view.currentQuestion
      : view.state === "processing"
        ? "Thinking…"
        : "";

  clear(el.recommendation);
  const rec = view.liveRecommendation;
  if (rec) {
    line(el.recommendation, "rec-best", displayDepartment(rec.best));
    if (rec.ambiguous && rec.candidates.length) {
      line(
        el.recommendation,
        "rec-candidates",
        `Weighing: ${rec.candidates.map(displayDepartment).join(" · ")}`,
      );
    }
    if (rec.rationale) line(el.recommendation, "rec-rationale", rec.rationale);
  } else {
    line(el.recommendation, "rec-placeholder", "No recommendation yet.");
  }

  clear(el.hpi);
  if (view.hpiPanel) {
    for (const [section, value] of Object.entries(view.hpiPanel)) {
      line(el.hpi, "hpi-section", `${section.replace(/_/g, " ")}: ${value}`);
    }
  }

  if (view.finalBanner) {
    el.banner.textContent = `Final routing: ${displayDepartment(view.finalBanner)}`;
    el.banner.classList.add("visible");
  } else {
    el.banner.textContent = "";
    el.banner.classList.remove("visible");
  }

  el.error.textContent = view.error ?? "";
  const inputEnabled = view.state === "awaiting_input";
  el.input.disabled = !inputEnabled;
  el.send.disabled = !inputEnabled;
}
