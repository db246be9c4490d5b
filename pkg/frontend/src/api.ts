/**
 * Typed client for the review service JSON/HTTP contract.
 *
 * All responses are JSON. Mutations go through PUT with the caller's base
 * revision; a stale revision comes back as {kind: "conflict"} carrying the
 * server's current revision rather than throwing, so the UI can reload and
 * tell the reviewer what happened.
 */

export type ItemStatus = "pending" | "accepted" | "edited" | "rejected";

export interface ItemSummary {
  image_id: string;
  status: ItemStatus;
  revision: number;
}

export interface ItemDetail {
  image_id: string;
  /** base64 P5 PGM */
  image: string;
  /** base64 P5 PGM, 0/255 */
  mask: string;
  status: ItemStatus;
  revision: number;
}

export type PutResult =
  | { kind: "ok"; revision: number }
  | { kind: "conflict"; revision: number | null; message: string }
  | { kind: "invalid"; message: string };

export class ServiceError extends Error {
  constructor(message: string, readonly status: number) {
    super(message);
  }
}

type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ReviewClient {
  constructor(private baseUrl: string,
              private fetchImpl: FetchLike = fetch) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async listItems(status?: ItemStatus): Promise<ItemSummary[]> {
    const query = status ? `?status=${status}` : "";
    const res = await this.fetchImpl(this.url(`/api/items${query}`));
    if (!res.ok) {
      throw new ServiceError(`list failed: ${res.status}`, res.status);
    }
    const body = await res.json();
    return body.items as ItemSummary[];
  }

  async getItem(imageId: string): Promise<ItemDetail> {
    const res = await this.fetchImpl(this.url(`/api/items/${imageId}`));
    if (!res.ok) {
      throw new ServiceError(`get ${imageId} failed: ${res.status}`,
                             res.status);
    }
    return await res.json() as ItemDetail;
  }

  async putItem(imageId: string, status: ItemStatus, revision: number,
                maskB64?: string): Promise<PutResult> {
    const body: Record<string, unknown> = { status, revision };
    if (maskB64 !== undefined) body.mask = maskB64;
    const res = await this.fetchImpl(this.url(`/api/items/${imageId}`), {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    const payload = await res.json().catch(() => ({}));
    if (res.ok) {
      return { kind: "ok", revision: payload.revision as number };
    }
    if (res.status === 409) {
      return {
        kind: "conflict",
        revision: (payload.revision ?? null) as number | null,
        message: String(payload.error ?? "conflict"),
      };
    }
    if (res.status === 422) {
      return { kind: "invalid", message: String(payload.error ?? "invalid") };
    }
    throw new ServiceError(String(payload.error ?? `put failed: ${res.status}`),
                           res.status);
  }
}
