import { describe, expect, it } from "vitest";

import { formatBytes, formatLatency, formatPercent } from "../src/format";

describe("formatPercent", () => {
  it("renders 0.9821 as 98.21%", () => {
    expect(formatPercent(0.9821)).toBe("98.21%");
  });

  it("always shows two decimals", () => {
    expect(formatPercent(1)).toBe("100.00%");
    expect(formatPercent(0)).toBe("0.00%");
    expect(formatPercent(0.5)).toBe("50.00%");
  });

  it("rounds at the second decimal", () => {
    expect(formatPercent(0.98216)).toBe("98.22%");
    expect(formatPercent(0.98214)).toBe("98.21%");
  });
});

describe("formatLatency / formatBytes", () => {
  it("latency keeps one decimal", () => {
    expect(formatLatency(4.25)).toBe("4.3 ms");
    expect(formatLatency(12)).toBe("12.0 ms");
  });

  it("bytes pick a sensible unit", () => {
    expect(formatBytes(512)).toBe("512 B");
    expect(formatBytes(2048)).toBe("2.0 KiB");
    expect(formatBytes(3 << 20)).toBe("3.0 MiB");
  });
});
