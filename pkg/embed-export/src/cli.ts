#!/usr/bin/env node
/** CLI wrapper: embed-export --manifest items.json --out bundle.mimb */

import { writeFileSync } from "node:fs";

import { ExportError, exportBundle } from "./export.js";
import { ManifestError } from "./manifest.js";

const USAGE = `usage: embed-export --manifest <csv|json> --out <bundle.mimb>
  [--text-encoder hash] [--image-encoder hash] [--align-encoder hash]
  [--max-tokens 197] [--text-dim 32] [--image-dim 32] [--clip-dim 16]
  [--report <report.json>]`;

interface Args {
  manifest: string;
  out: string;
  textEncoder: string;
  imageEncoder: string;
  alignEncoder: string;
  maxTokens: number;
  textDim: number;
  imageDim: number;
  clipDim: number;
  report?: string;
}

function parseArgs(argv: string[]): Args {
  const values: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (!flag.startsWith("--") || value === undefined) {
      throw new Error(`bad argument ${flag}`);
    }
    values[flag.slice(2)] = value;
  }
  const str = (name: string, fallback?: string): string => {
    const v = values[name] ?? fallback;
    if (v === undefined) throw new Error(`missing required --${name}`);
    delete values[name];
    return v;
  };
  const num = (name: string, fallback: number): number => {
    const v = Number(str(name, String(fallback)));
    if (!Number.isInteger(v) || v < 1) throw new Error(`--${name} must be a positive integer`);
    return v;
  };
  const args: Args = {
    manifest: str("manifest"),
    out: str("out"),
    textEncoder: str("text-encoder", "hash"),
    imageEncoder: str("image-encoder", "hash"),
    alignEncoder: str("align-encoder", "hash"),
    maxTokens: num("max-tokens", 197),
    textDim: num("text-dim", 32),
    imageDim: num("image-dim", 32),
    clipDim: num("clip-dim", 16),
    report: values["report"],
  };
  delete values["report"];
  const unknown = Object.keys(values);
  if (unknown.length) throw new Error(`unknown flags: ${unknown.join(", ")}`);
  return args;
}

export async function main(argv: string[]): Promise<number> {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error((err as Error).message);
    console.error(USAGE);
    return 2;
  }
  try {
    const report = await exportBundle(args);
    if (args.report) {
      writeFileSync(args.report, JSON.stringify(report, null, 2));
    }
    console.log(
      JSON.stringify({
        out: args.out,
        written: report.written.length,
        skipped: report.skipped,
        header: report.header,
      }),
    );
    return 0;
  } catch (err) {
    if (err instanceof ManifestError) {
      console.error(`manifest error: ${err.message}`);
      return 3;
    }
    if (err instanceof ExportError) {
      console.error(`export error: ${err.message}`);
      return 4;
    }
    console.error(`error: ${(err as Error).message}`);
    return 1;
  }
}

const invokedDirectly =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${process.argv[1]}`).href;
if (invokedDirectly) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
