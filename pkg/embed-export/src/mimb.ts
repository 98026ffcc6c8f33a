/**
 * MIMB bundle writer: little-endian binary interchange with the trainer.
 *
 * Layout:
 *   header:  "MIMB" | u32 version | u32 nSamples
 *            | u32 nTextTokens | u32 textDim
 *            | u32 nImageTokens | u32 imageDim | u32 clipDim
 *   record:  u8 label | u8 interactionTruth
 *            | f32 text tokens (row-major) | f32 image tokens
 *            | f32 clipText | f32 clipImage
 *            | u16 nTextValid | u16 nImageValid   (version 2)
 */

import { writeFileSync } from "node:fs";

export const MAGIC = "MIMB";
export const HEADER_SIZE = 32;
export const UNKNOWN_TRUTH = 255;

export interface BundleHeader {
  version: 1 | 2;
  nSamples: number;
  nTextTokens: number;
  textDim: number;
  nImageTokens: number;
  imageDim: number;
  clipDim: number;
}

export interface EmbeddingRecord {
  label: 0 | 1;
  interactionTruth: number;
  /** row-major (nTextTokens, textDim) */
  text: Float32Array;
  /** row-major (nImageTokens, imageDim) */
  image: Float32Array;
  clipText: Float32Array;
  clipImage: Float32Array;
  nTextValid?: number;
  nImageValid?: number;
}

export function recordSize(header: BundleHeader): number {
  const floats =
    header.nTextTokens * header.textDim +
    header.nImageTokens * header.imageDim +
    2 * header.clipDim;
  return 2 + 4 * floats + (header.version >= 2 ? 4 : 0);
}

function checkFinite(name: string, arr: Float32Array, expected: number): void {
  if (arr.length !== expected) {
    throw new Error(`${name}: expected ${expected} floats, got ${arr.length}`);
  }
  for (const v of arr) {
    if (!Number.isFinite(v)) throw new Error(`${name}: non-finite value`);
  }
}

function isNonZero(arr: Float32Array): boolean {
  return arr.some((v) => v !== 0);
}

export function encodeBundle(
  header: BundleHeader,
  records: EmbeddingRecord[],
): Buffer {
  if (records.length !== header.nSamples) {
    throw new Error(
      `${records.length} records but header says ${header.nSamples}`,
    );
  }
  const buf = Buffer.alloc(HEADER_SIZE + recordSize(header) * records.length);
  buf.write(MAGIC, 0, "ascii");
  let off = 4;
  for (const v of [
    header.version,
    header.nSamples,
    header.nTextTokens,
    header.textDim,
    header.nImageTokens,
    header.imageDim,
    header.clipDim,
  ]) {
    buf.writeUInt32LE(v >>> 0, off);
    off += 4;
  }

  for (const [i, rec] of records.entries()) {
    checkFinite(`record ${i}: text`, rec.text, header.nTextTokens * header.textDim);
    checkFinite(`record ${i}: image`, rec.image, header.nImageTokens * header.imageDim);
    checkFinite(`record ${i}: clipText`, rec.clipText, header.clipDim);
    checkFinite(`record ${i}: clipImage`, rec.clipImage, header.clipDim);
    if (!isNonZero(rec.clipText) || !isNonZero(rec.clipImage)) {
      throw new Error(`record ${i}: zero alignment vector`);
    }
    buf.writeUInt8(rec.label, off);
    buf.writeUInt8(rec.interactionTruth, off + 1);
    off += 2;
    for (const arr of [rec.text, rec.image, rec.clipText, rec.clipImage]) {
      for (const v of arr) {
        buf.writeFloatLE(v, off);
        off += 4;
      }
    }
    if (header.version >= 2) {
      const textValid = rec.nTextValid ?? header.nTextTokens;
      const imageValid = rec.nImageValid ?? header.nImageTokens;
      if (textValid > header.nTextTokens || imageValid > header.nImageTokens) {
        throw new Error(`record ${i}: valid-token count exceeds header`);
      }
      buf.writeUInt16LE(textValid, off);
      buf.writeUInt16LE(imageValid, off + 2);
      off += 4;
    }
  }
  return buf;
}

export function writeBundle(
  path: string,
  header: BundleHeader,
  records: EmbeddingRecord[],
): void {
  writeFileSync(path, encodeBundle(header, records));
}

/** Cosine of two stored float32 vectors, accumulated in float64. */
export function cosine(a: Float32Array, b: Float32Array): number {
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na === 0 || nb === 0) throw new Error("cosine of a zero vector");
  return dot / Math.sqrt(na * nb);
}
