/** App shell: a hash router over the two screens.
 *
 *   #/            run list
 *   #/runs/{id}   one run: timeline + intervention editor + tree
 *
 * The service base URL comes from `window.CELLSMITH_BASE_URL` (set it in
 * index.html) and defaults to the page origin.
 */

import { ConsoleClient } from "./client.js";
import { clear, h } from "./dom.js";
import { RunListController } from "./runList.js";
import { RunViewController } from "./runView.js";
import { TreeInspector } from "./tree.js";

declare global {
  interface Window {
    CELLSMITH_BASE_URL?: string;
  }
}

interface Screen {
  dispose(): void;
}

export class App {
  private screen: Screen | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly client: ConsoleClient,
  ) {}

  navigate(hash: string): void {
    this.screen?.dispose();
    this.screen = null;
    clear(this.root);
    const match = /^#\/runs\/([0-9a-f]+)$/.exec(hash);
    if (match) {
      this.screen = this.openRun(match[1]);
    } else {
      this.screen = this.openList();
    }
  }

  private openList(): Screen {
    const list = new RunListController(this.root, this.client, {
      onOpen: (runId) => {
        location.hash = `#/runs/${runId}`;
      },
    });
    void list.refresh();
    return list;
  }

  private openRun(runId: string): Screen {
    this.root.append(
      h("a", { href: "#/", class: "back-link", text: "← all runs" }),
    );
    const view = new RunViewController(this.root, this.client, runId);
    void view.open();

    const treeContainer = h("div", { class: "tree-panel" });
    const refreshButton = h("button", {
      class: "tree-refresh",
      text: "load search tree",
    });
    this.root.append(refreshButton, treeContainer);
    const inspector = new TreeInspector(treeContainer, this.client, runId);
    refreshButton.addEventListener("click", () => void inspector.refresh());
    return {
      dispose: () => view.dispose(),
    };
  }
}

export function mount(root: HTMLElement): App {
  const base = window.CELLSMITH_BASE_URL ?? location.origin;
  const app = new App(root, new ConsoleClient(base));
  window.addEventListener("hashchange", () => app.navigate(location.hash));
  app.navigate(location.hash);
  return app;
}
