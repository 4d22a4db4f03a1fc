import { defineConfig } from "vitest/config";

// Dev server proxies /api to a locally running gateway
// (`edgeinfer serve --workdir ...`); production builds are served by the
// gateway itself via `edgeinfer serve --static-dir frontend/dist`.
export default defineConfig({
  server: {
    proxy: {
      "/api": "http://127.0.0.1:8321",
    },
  },
  test: {
    environment: "jsdom",
    include: ["tests/**/*.test.ts"],
  },
});
