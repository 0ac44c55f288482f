/** Export: the selected card leaves as a PNG + provenance-echo JSON pair.
 *
 * The echo is the server's record passed through as raw bytes — no
 * re-serialization — so the exported file is byte-identical to what
 * GET /images/{hash}/record returns.
 */

import type { StudioApi } from "./api.js";
import type { GalleryCard } from "./state.js";

export interface ExportBundle {
  pngName: string;
  png: ArrayBuffer;
  echoName: string;
  echo: ArrayBuffer;
}

export async function exportCard(api: StudioApi, card: GalleryCard): Promise<ExportBundle> {
  const [png, echo] = await Promise.all([
    api.imageBytes(card.hash),
    api.recordBytes(card.hash),
  ]);
  return {
    pngName: `${card.hash}.png`,
    png,
    echoName: `${card.hash}.json`,
    echo,
  };
}

/** Browser-side download helper (DOM only; unit tests cover exportCard). */
export function triggerDownload(bundle: ExportBundle): void {
  for (const [name, bytes, type] of [
    [bundle.pngName, bundle.png, "image/png"],
    [bundle.echoName, bundle.echo, "application/json"],
  ] as const) {
    const url = URL.createObjectURL(new Blob([bytes], { type }));
    const a = document.createElement("a");
    a.href = url;
    a.download = name;
    a.click();
    URL.revokeObjectURL(url);
  }
}
