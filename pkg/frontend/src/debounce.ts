// Trailing-edge debounce: the slider fires continuously while dragging, but
// only the final value within each window goes to the service.

export function debounce<T extends unknown[]>(
  fn: (...args: T) => void,
  waitMs: number,
  timers: { set: typeof setTimeout; clear: typeof clearTimeout } = {
    set: setTimeout,
    clear: clearTimeout,
  },
): (...args: T) => void {
  let handle: ReturnType<typeof setTimeout> | null = null;
  return (...args: T) => {
    if (handle !== null) timers.clear(handle);
    handle = timers.set(() => {
      handle = null;
      fn(...args);
    }, waitMs);
  };
}

export const SLIDER_DEBOUNCE_MS = 50;
