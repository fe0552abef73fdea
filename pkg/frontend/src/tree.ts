/** Search tree inspector: the node hierarchy with Q / v / p / status per
 * node; selecting a node shows its cell and outcome.  The dump comes
 * verbatim from GET /runs/{id}/tree — nothing is recomputed here. */

import { ConsoleClient } from "./client.js";
import { clear, h } from "./dom.js";
import { nodeClass, stat, summarizeCode } from "./format.js";
import type { TreeDump, TreeNode } from "./types.js";

export interface TreeRender {
  root: HTMLElement;
  select: (nodeId: number) => void;
}

export function renderTree(
  dump: TreeDump,
  onSelect?: (node: TreeNode) => void,
): TreeRender {
  const byId = new Map<number, TreeNode>();
  for (const node of dump.nodes) {
    byId.set(node.node_id, node);
  }
  const detail = h("div", { class: "node-detail" });
  const root = h("div", { class: "tree" });

  const select = (nodeId: number) => {
    const node = byId.get(nodeId);
    if (!node) return;
    clear(detail);
    detail.append(
      h("h4", { text: `node #${node.node_id} (${node.status})` }),
      h("pre", { class: "node-code", text: node.code || "(root)" }),
      node.error !== null
        ? h("pre", { class: "node-error", text: node.error })
        : h("p", { class: "node-ok", text: "no error recorded" }),
    );
    for (const marked of root.querySelectorAll(".selected")) {
      marked.classList.remove("selected");
    }
    root
      .querySelector(`[data-node-id="${node.node_id}"]`)
      ?.classList.add("selected");
    onSelect?.(node);
  };

  const renderNode = (nodeId: number): HTMLElement => {
    const node = byId.get(nodeId);
    if (!node) {
      return h("li", { class: "node node-missing", text: `#${nodeId}?` });
    }
    const label = h(
      "span",
      {
        class: "node-label",
        onclick: () => select(node.node_id),
      },
      h("code", { text: `#${node.node_id}` }),
      h("span", { class: "node-status", text: node.status }),
      h("span", {
        class: "node-stats",
        text: `Q=${stat(node.value_Q)} v=${node.visits_v} p=${stat(node.prior_p)}`,
      }),
      h("span", { class: "node-snippet", text: summarizeCode(node.code) }),
    );
    const item = h(
      "li",
      { class: nodeClass(node.status), "data-node-id": String(node.node_id) },
      label,
    );
    if (node.children.length > 0) {
      const list = h("ul", { class: "node-children" });
      for (const childId of node.children) {
        list.append(renderNode(childId));
      }
      item.append(list);
    }
    return item;
  };

  root.append(h("ul", { class: "node-children" }, renderNode(dump.root)), detail);
  return { root, select };
}

/** Fetch-and-render wrapper used by the app shell. */
export class TreeInspector {
  private rendered: TreeRender | null = null;

  constructor(
    private readonly container: HTMLElement,
    private readonly client: ConsoleClient,
    private readonly runId: string,
  ) {}

  async refresh(onSelect?: (node: TreeNode) => void): Promise<TreeRender> {
    const response = await this.client.getTree(this.runId);
    clear(this.container);
    this.rendered = renderTree(response.tree, onSelect);
    this.container.append(this.rendered.root);
    return this.rendered;
  }
}
