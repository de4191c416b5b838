/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * The eye image with the class map blended in at `overlay` (0 to 1).
     */
    eye(user: number, sample: number, overlay: number): Picture;
    /**
     * Nearest user by distance to the mean style feature of a few other
     * samples of each user. Features are z-scored over those references,
     * as the recognition heads do. The first call builds the backbone,
     * which takes a few seconds.
     */
    identify(user: number, sample: number): Match;
    /**
     * The trimmed iris crop, optionally rotated (`degree` in degrees) or
     * perspective-warped (`degree` in 0..=1). Glints show in red.
     */
    iris(user: number, sample: number, variation: string, degree: number): Picture;
    constructor(users: number, samples_per_user: number, seed: number);
    readonly samples_per_user: number;
    readonly users: number;
}

/**
 * Result of matching one sample against every user.
 */
export class Match {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Distance to each user's reference centroid.
     */
    distances(): Float64Array;
    readonly predicted_user: number;
    readonly true_user: number;
}

/**
 * An RGBA raster for a canvas `ImageData`.
 */
export class Picture {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Copies the pixels out; JS wraps them in a `Uint8ClampedArray`.
     */
    rgba(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly __wbg_match_free: (a: number, b: number) => void;
    readonly __wbg_picture_free: (a: number, b: number) => void;
    readonly demo_eye: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly demo_identify: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_iris: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly demo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly demo_samples_per_user: (a: number) => number;
    readonly demo_users: (a: number) => number;
    readonly match_distances: (a: number) => [number, number];
    readonly match_predicted_user: (a: number) => number;
    readonly match_true_user: (a: number) => number;
    readonly picture_height: (a: number) => number;
    readonly picture_rgba: (a: number) => [number, number];
    readonly picture_width: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
