import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    // node environment: HTTP in tests uses Node's own fetch (real
    // streaming); DOM tests build a happy-dom Window explicitly via
    // tests/helpers/dom.ts.
    environment: "node",
    include: ["tests/**/*.test.ts"],
    testTimeout: 30_000,
    hookTimeout: 30_000,
  },
});
