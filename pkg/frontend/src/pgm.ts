/**
 * Minimal binary PGM (P5) codec plus base64 helpers.
 *
 * The review service exchanges images and masks as base64-encoded P5 files;
 * masks use 0/255 values. Encoding here must be byte-exact against the
 * service's own writer so round trips can be compared bit for bit.
 */

export interface PgmImage {
  width: number;
  height: number;
  /** row-major, one byte per pixel */
  pixels: Uint8Array;
}

export function decodePgm(bytes: Uint8Array): PgmImage {
  let pos = 0;

  function isSpace(b: number): boolean {
    return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d;
  }

  function token(): string {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    if (bytes[pos] === 0x23) { // '#' comment line
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
      return token();
    }
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    if (start === pos) throw new Error(`truncated PGM header at byte ${start}`);
    let out = "";
    for (let i = start; i < pos; i++) out += String.fromCharCode(bytes[i]);
    return out;
  }

  const magic = token();
  if (magic !== "P5") throw new Error(`bad PGM magic ${magic}`);
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0) || !(height > 0)) throw new Error("bad PGM dimensions");
  if (maxval !== 255) throw new Error(`unsupported maxval ${maxval}`);
  pos++; // single whitespace after maxval
  const expected = width * height;
  if (bytes.length - pos !== expected) {
    throw new Error(`expected ${expected} pixel bytes, got ${bytes.length - pos}`);
  }
  return { width, height, pixels: bytes.slice(pos) };
}

export function encodePgm(img: PgmImage): Uint8Array {
  const header = `P5\n${img.width} ${img.height}\n255\n`;
  const out = new Uint8Array(header.length + img.pixels.length);
  for (let i = 0; i < header.length; i++) out[i] = header.charCodeAt(i);
  out.set(img.pixels, header.length);
  return out;
}

export function base64ToBytes(b64: string): Uint8Array {
  const binary = atob(b64);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) out[i] = binary.charCodeAt(i);
  return out;
}

export function bytesToBase64(bytes: Uint8Array): string {
  let binary = "";
  const chunk = 0x8000;
  for (let i = 0; i < bytes.length; i += chunk) {
    binary += String.fromCharCode(...bytes.subarray(i, i + chunk));
  }
  return btoa(binary);
}
