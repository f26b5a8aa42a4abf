/** Canvas drawing expressed as plain command lists so view logic stays pure
 * and testable; `applyCommands` interprets them on a 2D context. */

export type DrawCmd =
  | { op: "rect"; x: number; y: number; w: number; h: number;
      fill: string }
  | { op: "circle"; x: number; y: number; r: number; fill?: string;
      stroke?: string; dash?: number[] }
  | { op: "line"; x1: number; y1: number; x2: number; y2: number;
      stroke: string; width?: number }
  | { op: "poly"; points: [number, number][]; fill: string }
  | { op: "text"; x: number; y: number; text: string; fill: string;
      font?: string };

export function applyCommands(ctx: CanvasRenderingContext2D,
                              cmds: DrawCmd[]): void {
  for (const c of cmds) {
    switch (c.op) {
      case "rect":
        ctx.fillStyle = c.fill;
        ctx.fillRect(c.x, c.y, c.w, c.h);
        break;
      case "circle":
        ctx.beginPath();
        ctx.setLineDash(c.dash ?? []);
        ctx.arc(c.x, c.y, c.r, 0, 2 * Math.PI);
        if (c.fill) {
          ctx.fillStyle = c.fill;
          ctx.fill();
        }
        if (c.stroke) {
          ctx.strokeStyle = c.stroke;
          ctx.stroke();
        }
        ctx.setLineDash([]);
        break;
      case "line":
        ctx.beginPath();
        ctx.strokeStyle = c.stroke;
        ctx.lineWidth = c.width ?? 1;
        ctx.moveTo(c.x1, c.y1);
        ctx.lineTo(c.x2, c.y2);
        ctx.stroke();
        ctx.lineWidth = 1;
        break;
      case "poly":
        ctx.beginPath();
        ctx.fillStyle = c.fill;
        c.points.forEach(([x, y], i) =>
          i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y));
        ctx.closePath();
        ctx.fill();
        break;
      case "text":
        ctx.fillStyle = c.fill;
        ctx.font = c.font ?? "12px sans-serif";
        ctx.fillText(c.text, c.x, c.y);
        break;
    }
  }
}

export function escapeHtml(s: string): string {
  return s.replace(/&/g, "&amp;").replace(/</g, "&lt;")
    .replace(/>/g, "&gt;").replace(/"/g, "&quot;");
}
