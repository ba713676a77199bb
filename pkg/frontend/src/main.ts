/**
 * Wiring: schema -> panel -> debounced latest-wins renders.
 *
 * The UI never talks to anything but the render service HTTP API. A failed
 * schema load or render keeps the previous image and shows the banner or a
 * toast with the diagnostic id; the event loop stays alive either way.
 */

import { ApiClient, ApiError } from "./api.js";
import { LatestWins } from "./latestWins.js";
import { buildPanel, PanelElements, SchemaError, showBanner, showToast } from "./panel.js";
import {
  createState,
  EditorState,
  renderBody,
  setAlpha,
  setChannel,
  setGroupedBeta,
  toggleInterpolation,
} from "./state.js";
import { ChannelSpec, RenderResponse } from "./types.js";

export const DEBOUNCE_MS = 100;

export interface App {
  panel: PanelElements;
  state: EditorState;
  scheduler: LatestWins<RenderResponse>;
}

export function wireApp(doc: Document, api: ApiClient, channels: ChannelSpec[],
                        sources: string[]): App {
  const panel = buildPanel(doc, channels);
  const state = createState(channels);

  for (const id of sources) {
    const option = doc.createElement("option");
    option.value = id;
    option.textContent = id;
    panel.sourceSelect.append(option);
  }
  state.sourceId = sources.length ? sources[0] : null;

  const scheduler = new LatestWins<RenderResponse>(
    DEBOUNCE_MS,
    () => {
      state.pending = true;
      const body = renderBody(state);
      return "alpha" in body ? api.interpolate(body) : api.render(body);
    },
    (result) => {
      state.pending = false;
      state.lastImage = result.image;
      state.lastLatencyMs = result.latency_ms;
      panel.image.src = `data:image/png;base64,${result.image}`;
      panel.latency.textContent = `${result.latency_ms.toFixed(1)} ms`;
      showBanner(panel, false);
    },
    (error) => {
      state.pending = false;
      if (error instanceof ApiError) {
        const tag = error.diagnosticId ? ` [${error.diagnosticId}]` : "";
        showToast(panel, `render failed (${error.status})${tag}`);
      } else {
        showBanner(panel, true); // network-level failure
      }
    },
  );

  panel.sourceSelect.addEventListener("change", () => {
    state.sourceId = panel.sourceSelect.value;
    scheduler.request();
  });
  for (const handle of panel.sliders) {
    handle.input.addEventListener("input", () => {
      const value = Number(handle.input.value);
      if (handle.kind === "channel" && handle.index !== null) {
        setChannel(state, channels, handle.index, value);
      } else {
        setGroupedBeta(state, channels, value);
      }
      scheduler.request();
    });
  }
  panel.interpolationToggle.addEventListener("change", () => {
    toggleInterpolation(state, panel.interpolationToggle.checked);
    panel.alphaRow.classList.toggle("hidden", !panel.interpolationToggle.checked);
    scheduler.request();
  });
  panel.alphaSlider.addEventListener("input", () => {
    setAlpha(state, Number(panel.alphaSlider.value));
    scheduler.request();
  });
  return { panel, state, scheduler };
}

export async function boot(doc: Document, api: ApiClient, mount: HTMLElement): Promise<App | null> {
  let app: App | null = null;
  try {
    const info = await api.info();
    const sources = await api.sources();
    app = wireApp(doc, api, info.channels, sources);
    mount.append(app.panel.root);
    app.scheduler.request();
  } catch (error) {
    const banner = doc.createElement("div");
    banner.className = "banner";
    banner.textContent = error instanceof SchemaError
      ? `bad service schema: ${error.message}`
      : "service unreachable";
    const retry = doc.createElement("button");
    retry.textContent = "retry";
    retry.addEventListener("click", () => {
      banner.remove();
      void boot(doc, api, mount);
    });
    banner.append(retry);
    mount.append(banner);
  }
  return app;
}

declare const window: (Window & typeof globalThis) | undefined;

if (typeof window !== "undefined" && typeof document !== "undefined") {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("service") ?? "";
  void boot(document, new ApiClient(base), document.getElementById("app") ?? document.body);
}
