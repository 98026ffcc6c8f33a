/**
 * Export pipeline: run the configured encoders over every manifest item and
 * emit a version-2 MIMB bundle (interaction truth unknown, padded token
 * counts recorded per record).
 */

import { readFileSync } from "node:fs";

import { createEncoders, EncoderSet } from "./encoders.js";
import { loadManifest, ManifestRow } from "./manifest.js";
import {
  BundleHeader,
  cosine,
  EmbeddingRecord,
  UNKNOWN_TRUTH,
  writeBundle,
} from "./mimb.js";

export interface ExportOptions {
  manifest: string;
  out: string;
  textEncoder: string;
  imageEncoder: string;
  alignEncoder: string;
  maxTokens: number;
  textDim: number;
  imageDim: number;
  clipDim: number;
  log?: (msg: string) => void;
}

export interface ExportReport {
  header: BundleHeader;
  written: { id: string; label: number; alignmentCosine: number }[];
  skipped: string[];
}

export class ExportError extends Error {}

function flatten(tokens: Float32Array[], dim: number): Float32Array {
  const out = new Float32Array(tokens.length * dim);
  tokens.forEach((row, i) => out.set(row, i * dim));
  return out;
}

async function encodeItem(
  row: ManifestRow,
  encoders: EncoderSet,
  maxTokens: number,
): Promise<{ record: EmbeddingRecord; alignmentCosine: number }> {
  const imageBytes = readFileSync(row.image);
  const text = await encoders.text.encode(row.text, maxTokens);
  const image = await encoders.image.encode(imageBytes, maxTokens);
  const clipText = await encoders.align.encodeText(row.text);
  const clipImage = await encoders.align.encodeImage(imageBytes);
  const record: EmbeddingRecord = {
    label: row.label,
    interactionTruth: UNKNOWN_TRUTH,
    text: flatten(text.tokens, encoders.text.dim),
    image: flatten(image.tokens, encoders.image.dim),
    clipText,
    clipImage,
    nTextValid: text.valid,
    nImageValid: image.valid,
  };
  return { record, alignmentCosine: cosine(clipText, clipImage) };
}

export async function exportBundle(opts: ExportOptions): Promise<ExportReport> {
  const log = opts.log ?? ((msg: string) => console.error(msg));
  const rows = loadManifest(opts.manifest);
  const encoders = createEncoders(opts);

  const records: EmbeddingRecord[] = [];
  const written: ExportReport["written"] = [];
  const skipped: string[] = [];
  for (const row of rows) {
    try {
      const { record, alignmentCosine } = await encodeItem(
        row,
        encoders,
        opts.maxTokens,
      );
      records.push(record);
      written.push({ id: row.id, label: row.label, alignmentCosine });
    } catch (err) {
      skipped.push(row.id);
      log(`skipping item ${row.id}: ${(err as Error).message}`);
    }
  }
  if (records.length === 0) {
    throw new ExportError("no items could be encoded; nothing to write");
  }

  const header: BundleHeader = {
    version: 2,
    nSamples: records.length,
    nTextTokens: opts.maxTokens,
    textDim: encoders.text.dim,
    nImageTokens: opts.maxTokens,
    imageDim: encoders.image.dim,
    clipDim: encoders.align.dim,
  };
  writeBundle(opts.out, header, records);
  return { header, written, skipped };
}
