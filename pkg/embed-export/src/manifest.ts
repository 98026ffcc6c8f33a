/** Manifest loading: JSON arrays or CSV with an id,text,image,label header. */

import { existsSync, readFileSync } from "node:fs";
import { dirname, isAbsolute, resolve } from "node:path";

export interface ManifestRow {
  id: string;
  text: string;
  /** resolved path to the image file */
  image: string;
  label: 0 | 1;
}

export class ManifestError extends Error {}

function parseCsv(text: string): string[][] {
  const rows: string[][] = [];
  let row: string[] = [];
  let field = "";
  let inQuotes = false;
  for (let i = 0; i < text.length; i++) {
    const ch = text[i];
    if (inQuotes) {
      if (ch === '"') {
        if (text[i + 1] === '"') {
          field += '"';
          i++;
        } else {
          inQuotes = false;
        }
      } else {
        field += ch;
      }
    } else if (ch === '"') {
      inQuotes = true;
    } else if (ch === ",") {
      row.push(field);
      field = "";
    } else if (ch === "\n" || ch === "\r") {
      if (ch === "\r" && text[i + 1] === "\n") i++;
      row.push(field);
      field = "";
      if (row.length > 1 || row[0] !== "") rows.push(row);
      row = [];
    } else {
      field += ch;
    }
  }
  if (field !== "" || row.length) {
    row.push(field);
    rows.push(row);
  }
  return rows;
}

function coerceRow(raw: Record<string, unknown>, index: number, base: string): ManifestRow {
  const id = String(raw.id ?? index);
  const text = raw.text;
  const image = raw.image;
  const label = Number(raw.label);
  if (typeof text !== "string" || text.length === 0) {
    throw new ManifestError(`row ${id}: missing text`);
  }
  if (typeof image !== "string" || image.length === 0) {
    throw new ManifestError(`row ${id}: missing image path`);
  }
  if (label !== 0 && label !== 1) {
    throw new ManifestError(`row ${id}: label must be 0 or 1, got ${raw.label}`);
  }
  const path = isAbsolute(image) ? image : resolve(base, image);
  return { id, text, image: path, label: label as 0 | 1 };
}

export function loadManifest(path: string): ManifestRow[] {
  const base = dirname(resolve(path));
  const text = readFileSync(path, "utf-8");
  let rows: ManifestRow[];
  if (path.endsWith(".json")) {
    const parsed = JSON.parse(text);
    if (!Array.isArray(parsed)) {
      throw new ManifestError("JSON manifest must be an array of rows");
    }
    rows = parsed.map((r, i) => coerceRow(r, i, base));
  } else {
    const table = parseCsv(text);
    if (table.length < 2) throw new ManifestError("CSV manifest has no data rows");
    const header = table[0].map((h) => h.trim().toLowerCase());
    rows = table.slice(1).map((cells, i) => {
      const raw: Record<string, unknown> = {};
      header.forEach((name, j) => (raw[name] = cells[j]));
      return coerceRow(raw, i, base);
    });
  }
  if (rows.length === 0) throw new ManifestError("manifest is empty");
  const missing = rows.filter((r) => !existsSync(r.image));
  if (missing.length) {
    throw new ManifestError(
      `image paths do not exist: ${missing.map((r) => r.id).join(", ")}`,
    );
  }
  return rows;
}
