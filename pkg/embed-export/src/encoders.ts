/**
 * Encoder registry. The default "hash" family produces deterministic,
 * content-keyed pseudo-embeddings from SHA-256 streams, so the exporter is
 * fully offline and byte-reproducible. Identifiers of the form
 * "xenova:<model>" load real pretrained encoders through
 * @xenova/transformers when that package (and its weights) are available.
 */

import { createHash } from "node:crypto";

export interface TokenEmbedding {
  /** one Float32Array of length dim per (possibly padded) token */
  tokens: Float32Array[];
  /** number of real tokens before padding, <= maxTokens */
  valid: number;
}

export interface TextEncoder {
  id: string;
  dim: number;
  encode(text: string, maxTokens: number): Promise<TokenEmbedding>;
}

export interface ImageEncoder {
  id: string;
  dim: number;
  encode(imageBytes: Buffer, maxTokens: number): Promise<TokenEmbedding>;
}

export interface AlignEncoder {
  id: string;
  dim: number;
  encodeText(text: string): Promise<Float32Array>;
  encodeImage(imageBytes: Buffer): Promise<Float32Array>;
}

/** Deterministic floats in [-1, 1) from a SHA-256 counter stream. */
export function hashFloats(key: string | Buffer, n: number): Float32Array {
  const out = new Float32Array(n);
  let block = 0;
  let filled = 0;
  while (filled < n) {
    const digest = createHash("sha256")
      .update(typeof key === "string" ? Buffer.from(key, "utf-8") : key)
      .update(`#${block}`)
      .digest();
    for (let i = 0; i + 4 <= digest.length && filled < n; i += 4) {
      out[filled++] = (digest.readUInt32LE(i) / 0x100000000) * 2 - 1;
    }
    block += 1;
  }
  return out;
}

function normalized(v: Float32Array): Float32Array {
  let norm = 0;
  for (const x of v) norm += x * x;
  norm = Math.sqrt(norm);
  if (norm < 1e-12) {
    const unit = new Float32Array(v.length);
    unit[0] = 1;
    return unit;
  }
  return Float32Array.from(v, (x) => x / norm);
}

export function tokenize(text: string): string[] {
  return text.toLowerCase().split(/\s+/).filter((t) => t.length > 0);
}

class HashTextEncoder implements TextEncoder {
  readonly id = "hash";
  constructor(readonly dim: number) {}

  async encode(text: string, maxTokens: number): Promise<TokenEmbedding> {
    const words = tokenize(text);
    const valid = Math.max(1, Math.min(words.length, maxTokens));
    const tokens: Float32Array[] = [];
    for (let i = 0; i < maxTokens; i++) {
      tokens.push(
        i < valid
          ? hashFloats(`text-token:${words[i] ?? ""}`, this.dim)
          : new Float32Array(this.dim),
      );
    }
    return { tokens, valid };
  }
}

class HashImageEncoder implements ImageEncoder {
  readonly id = "hash";
  constructor(readonly dim: number) {}

  async encode(imageBytes: Buffer, maxTokens: number): Promise<TokenEmbedding> {
    const digest = createHash("sha256").update(imageBytes).digest("hex");
    const valid = Math.max(
      1,
      Math.min(maxTokens, Math.ceil(imageBytes.length / 256)),
    );
    const tokens: Float32Array[] = [];
    for (let i = 0; i < maxTokens; i++) {
      tokens.push(
        i < valid
          ? hashFloats(`image-patch:${digest}:${i}`, this.dim)
          : new Float32Array(this.dim),
      );
    }
    return { tokens, valid };
  }
}

class HashAlignEncoder implements AlignEncoder {
  readonly id = "hash";
  constructor(readonly dim: number) {}

  async encodeText(text: string): Promise<Float32Array> {
    return normalized(hashFloats(`align-text:${tokenize(text).join(" ")}`, this.dim));
  }

  async encodeImage(imageBytes: Buffer): Promise<Float32Array> {
    const digest = createHash("sha256").update(imageBytes).digest("hex");
    return normalized(hashFloats(`align-image:${digest}`, this.dim));
  }
}

async function loadTransformers(): Promise<any> {
  // specifier kept in a variable: the package is optional and may be absent
  const specifier = "@xenova/transformers";
  try {
    return await import(specifier);
  } catch (err) {
    throw new Error(
      "encoder requires @xenova/transformers, which is not installed " +
        `(${(err as Error).message}); use the default "hash" encoders for ` +
        "offline operation",
    );
  }
}

class TransformersTextEncoder implements TextEncoder {
  constructor(readonly id: string, readonly dim: number, private model: string) {}

  async encode(text: string, maxTokens: number): Promise<TokenEmbedding> {
    const tf = await loadTransformers();
    const extractor = await tf.pipeline("feature-extraction", this.model);
    const output = await extractor(text);
    const [nTokens, width] = output.dims.slice(-2);
    if (width !== this.dim) {
      throw new Error(`model width ${width} != configured dim ${this.dim}`);
    }
    const data: Float32Array = output.data;
    const valid = Math.max(1, Math.min(nTokens, maxTokens));
    const tokens: Float32Array[] = [];
    for (let i = 0; i < maxTokens; i++) {
      tokens.push(
        i < valid
          ? Float32Array.from(data.subarray(i * width, (i + 1) * width))
          : new Float32Array(this.dim),
      );
    }
    return { tokens, valid };
  }
}

export interface EncoderSet {
  text: TextEncoder;
  image: ImageEncoder;
  align: AlignEncoder;
}

export function createEncoders(opts: {
  textEncoder: string;
  imageEncoder: string;
  alignEncoder: string;
  textDim: number;
  imageDim: number;
  clipDim: number;
}): EncoderSet {
  const make = (spec: string, kind: "text" | "image" | "align") => {
    if (spec === "hash") {
      if (kind === "text") return new HashTextEncoder(opts.textDim);
      if (kind === "image") return new HashImageEncoder(opts.imageDim);
      return new HashAlignEncoder(opts.clipDim);
    }
    if (spec.startsWith("xenova:")) {
      const model = spec.slice("xenova:".length);
      if (kind === "text") {
        return new TransformersTextEncoder(spec, opts.textDim, model);
      }
      throw new Error(
        `pretrained ${kind} encoders are not wired up in this build; ` +
          'use "hash"',
      );
    }
    throw new Error(`unknown ${kind} encoder "${spec}"`);
  };
  return {
    text: make(opts.textEncoder, "text") as TextEncoder,
    image: make(opts.imageEncoder, "image") as ImageEncoder,
    align: make(opts.alignEncoder, "align") as AlignEncoder,
  };
}
