/**
 * Slider panel construction from the service's descriptor schema.
 *
 * Grouping rule: the first six expression coefficients get individual
 * sliders, the remaining expression channels share one grouped slider,
 * and rotation/translation each contribute three sliders (13 controls).
 */

import { ChannelSpec } from "./types.js";

export interface SliderHandle {
  kind: "channel" | "beta-group";
  index: number | null; // channel index for kind=channel
  input: HTMLInputElement;
  label: HTMLElement;
}

export interface PanelElements {
  root: HTMLElement;
  sliders: SliderHandle[];
  sourceSelect: HTMLSelectElement;
  image: HTMLImageElement;
  latency: HTMLElement;
  banner: HTMLElement;
  retryButton: HTMLButtonElement;
  toast: HTMLElement;
  interpolationToggle: HTMLInputElement;
  alphaSlider: HTMLInputElement;
  alphaRow: HTMLElement;
}

export class SchemaError extends Error {}

function validateSchema(channels: ChannelSpec[]): void {
  if (!Array.isArray(channels) || channels.length !== 73) {
    throw new SchemaError(`schema must list 73 channels, got ${channels?.length ?? "none"}`);
  }
  channels.forEach((spec, i) => {
    if (spec.index !== i || !(spec.min < spec.max) || typeof spec.name !== "string") {
      throw new SchemaError(`channel ${i} is malformed`);
    }
  });
}

function makeSlider(doc: Document, name: string, min: number, max: number,
                    value: number): { row: HTMLElement; input: HTMLInputElement; label: HTMLElement } {
  const row = doc.createElement("div");
  row.className = "slider-row";
  const label = doc.createElement("label");
  label.textContent = name;
  const input = doc.createElement("input");
  input.type = "range";
  input.min = String(min);
  input.max = String(max);
  input.step = "0.01";
  input.value = String(value);
  input.setAttribute("data-name", name);
  const readout = doc.createElement("span");
  readout.className = "readout";
  readout.textContent = Number(value).toFixed(2);
  input.addEventListener("input", () => {
    readout.textContent = Number(input.value).toFixed(2);
  });
  row.append(label, input, readout);
  return { row, input, label };
}

export function buildPanel(doc: Document, channels: ChannelSpec[]): PanelElements {
  validateSchema(channels);
  const root = doc.createElement("div");
  root.className = "editor";

  const banner = doc.createElement("div");
  banner.className = "banner hidden";
  const bannerText = doc.createElement("span");
  bannerText.textContent = "service unreachable";
  const retryButton = doc.createElement("button");
  retryButton.textContent = "retry";
  banner.append(bannerText, retryButton);
  root.append(banner);

  const toast = doc.createElement("div");
  toast.className = "toast hidden";
  root.append(toast);

  const viewer = doc.createElement("div");
  viewer.className = "viewer";
  const image = doc.createElement("img");
  image.alt = "render";
  const latency = doc.createElement("div");
  latency.className = "latency";
  const sourceSelect = doc.createElement("select");
  viewer.append(sourceSelect, image, latency);
  root.append(viewer);

  const controls = doc.createElement("div");
  controls.className = "controls";
  const sliders: SliderHandle[] = [];

  const addChannelSlider = (spec: ChannelSpec) => {
    const { row, input, label } = makeSlider(doc, spec.name, spec.min, spec.max, spec.default);
    controls.append(row);
    sliders.push({ kind: "channel", index: spec.index, input, label });
  };

  for (let i = 0; i < 6; i++) addChannelSlider(channels[i]);
  // grouped control for the remaining expression channels
  const groupSpec = channels[6];
  const grouped = makeSlider(doc, "beta_6..63 (group)", groupSpec.min, groupSpec.max,
                             groupSpec.default);
  controls.append(grouped.row);
  sliders.push({ kind: "beta-group", index: null, input: grouped.input, label: grouped.label });
  for (const spec of channels) {
    if (spec.group === "rotation" || spec.group === "translation") addChannelSlider(spec);
  }

  const interpRow = doc.createElement("div");
  interpRow.className = "interp-row";
  const interpolationToggle = doc.createElement("input");
  interpolationToggle.type = "checkbox";
  const interpLabel = doc.createElement("label");
  interpLabel.textContent = "interpolate from snapshot";
  const alphaRow = doc.createElement("div");
  alphaRow.className = "alpha-row hidden";
  const alpha = makeSlider(doc, "alpha", 0, 1, 1);
  alphaRow.append(alpha.row);
  interpRow.append(interpolationToggle, interpLabel);
  controls.append(interpRow, alphaRow);

  root.append(controls);
  return {
    root,
    sliders,
    sourceSelect,
    image,
    latency,
    banner,
    retryButton,
    toast,
    interpolationToggle,
    alphaSlider: alpha.input,
    alphaRow,
  };
}

export function showBanner(panel: Pick<PanelElements, "banner">, visible: boolean): void {
  panel.banner.classList.toggle("hidden", !visible);
}

export function showToast(panel: Pick<PanelElements, "toast">, message: string): void {
  panel.toast.textContent = message;
  panel.toast.classList.remove("hidden");
}
