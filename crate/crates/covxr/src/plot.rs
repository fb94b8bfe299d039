//! Minimal deterministic raster plotting: line charts and annotated grids
//! rendered straight into PNG buffers with an embedded 5x7 bitmap font.
//!
//! No system font or rendering library is involved, so a given input
//! always produces byte-identical output.

use std::path::Path;

use image::{Rgb, RgbImage};

pub(crate) type Color = [u8; 3];

pub(crate) const WHITE: Color = [255, 255, 255];
pub(crate) const BLACK: Color = [20, 20, 20];
pub(crate) const GRAY: Color = [200, 200, 200];
pub(crate) const TRAIN_COLOR: Color = [214, 69, 65];
pub(crate) const VAL_COLOR: Color = [31, 119, 180];

/// 5x7 glyphs, one byte per row, low five bits used (bit 4 = leftmost).
/// Lowercase input is rendered with the uppercase shapes.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b11011, 0b10001],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '-' => [0b00000, 0b00000, 0b00000, 0b01110, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        _ => [0; 7], // unknown characters (and spaces) render blank
    }
}

pub(crate) struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32, background: Color) -> Self {
        let img = RgbImage::from_pixel(width, height, Rgb(background));
        Self { img }
    }

    pub fn set(&mut self, x: i64, y: i64, color: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Color) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    pub fn rect_outline(&mut self, x: i64, y: i64, w: i64, h: i64, color: Color) {
        for xx in x..x + w {
            self.set(xx, y, color);
            self.set(xx, y + h - 1, color);
        }
        for yy in y..y + h {
            self.set(x, yy, color);
            self.set(x + w - 1, yy, color);
        }
    }

    /// Bresenham line with a square pen of the given thickness.
    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Color, thickness: i64) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        let r = thickness / 2;
        loop {
            self.fill_rect(x - r, y - r, thickness.max(1), thickness.max(1), color);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Color, scale: i64) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (ry, row) in rows.iter().enumerate() {
                for col in 0..5 {
                    if row & (1 << (4 - col)) != 0 {
                        self.fill_rect(
                            cx + col as i64 * scale,
                            y + ry as i64 * scale,
                            scale,
                            scale,
                            color,
                        );
                    }
                }
            }
            cx += 6 * scale;
        }
    }

    pub fn text_width(s: &str, scale: i64) -> i64 {
        s.chars().count() as i64 * 6 * scale - scale
    }

    pub fn save_png(&self, path: &Path) -> Result<(), std::io::Error> {
        self.img.save(path).map_err(std::io::Error::other)
    }
}

/// One plotted series.
pub(crate) struct Series {
    pub name: String,
    pub color: Color,
    pub points: Vec<(f64, f64)>,
}

/// A two-axis line chart with legend, ticks, and axis labels.
pub(crate) struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Fixed y range; `None` derives it from the data with padding.
    pub y_range: Option<(f64, f64)>,
}

fn nice_ticks(min: f64, max: f64, count: usize) -> Vec<f64> {
    let span = (max - min).max(1e-12);
    let raw_step = span / count as f64;
    let mag = 10f64.powf(raw_step.log10().floor());
    let norm = raw_step / mag;
    let step = if norm <= 1.0 {
        mag
    } else if norm <= 2.0 {
        2.0 * mag
    } else if norm <= 5.0 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut v = start;
    while v <= max + 1e-9 * span {
        ticks.push(v);
        v += step;
    }
    ticks
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e6 {
        format!("{}", v.round() as i64)
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

pub(crate) fn render_line_chart(chart: &LineChart, path: &Path) -> Result<(), std::io::Error> {
    const W: u32 = 800;
    const H: u32 = 600;
    const LEFT: i64 = 80;
    const RIGHT: i64 = 30;
    const TOP: i64 = 50;
    const BOTTOM: i64 = 70;

    let mut canvas = Canvas::new(W, H, WHITE);
    let plot_w = W as i64 - LEFT - RIGHT;
    let plot_h = H as i64 - TOP - BOTTOM;

    let all_points = || chart.series.iter().flat_map(|s| s.points.iter().copied());
    let (mut x_min, mut x_max) = all_points()
        .map(|(x, _)| x)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
    }
    if x_max - x_min < 1e-9 {
        x_min -= 1.0;
        x_max += 1.0;
    }
    let (mut y_min, mut y_max) = match chart.y_range {
        Some((lo, hi)) => (lo, hi),
        None => {
            let (lo, hi) = all_points()
                .map(|(_, y)| y)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            if lo.is_finite() {
                let pad = ((hi - lo) * 0.1).max(1e-6);
                ((lo - pad).min(0.0), hi + pad)
            } else {
                (0.0, 1.0)
            }
        }
    };
    if y_max - y_min < 1e-9 {
        y_min -= 0.5;
        y_max += 0.5;
    }

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = LEFT + ((x - x_min) / (x_max - x_min) * plot_w as f64).round() as i64;
        let py = TOP + plot_h - ((y - y_min) / (y_max - y_min) * plot_h as f64).round() as i64;
        (px, py)
    };

    // frame and ticks
    canvas.rect_outline(LEFT, TOP, plot_w + 1, plot_h + 1, BLACK);
    for tick in nice_ticks(y_min, y_max, 6) {
        let (_, py) = to_px(x_min, tick);
        canvas.line(LEFT - 4, py, LEFT, py, BLACK, 1);
        canvas.line(LEFT + 1, py, LEFT + plot_w - 1, py, GRAY, 1);
        let label = format_tick(tick);
        canvas.text(LEFT - 10 - Canvas::text_width(&label, 1), py - 3, &label, BLACK, 1);
    }
    for tick in nice_ticks(x_min, x_max, 10) {
        let (px, _) = to_px(tick, y_min);
        canvas.line(px, TOP + plot_h, px, TOP + plot_h + 4, BLACK, 1);
        let label = format_tick(tick);
        canvas.text(px - Canvas::text_width(&label, 1) / 2, TOP + plot_h + 8, &label, BLACK, 1);
    }

    // series with point markers so single-epoch histories stay visible
    for s in &chart.series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let (px, py) = to_px(x, y);
            if let Some((qx, qy)) = prev {
                canvas.line(qx, qy, px, py, s.color, 2);
            }
            canvas.fill_rect(px - 2, py - 2, 5, 5, s.color);
            prev = Some((px, py));
        }
    }

    // title and axis labels
    let title_scale = 2;
    canvas.text(
        (W as i64 - Canvas::text_width(&chart.title, title_scale)) / 2,
        12,
        &chart.title,
        BLACK,
        title_scale,
    );
    canvas.text(
        LEFT + (plot_w - Canvas::text_width(&chart.x_label, 1)) / 2,
        H as i64 - 30,
        &chart.x_label,
        BLACK,
        1,
    );
    canvas.text(8, TOP - 16, &chart.y_label, BLACK, 1);

    // legend, top-right inside the frame
    let legend_scale = 1;
    let widest = chart
        .series
        .iter()
        .map(|s| Canvas::text_width(&s.name, legend_scale))
        .max()
        .unwrap_or(0);
    let legend_w = widest + 40;
    let legend_h = chart.series.len() as i64 * 14 + 8;
    let lx = LEFT + plot_w - legend_w - 10;
    let ly = TOP + 10;
    canvas.fill_rect(lx, ly, legend_w, legend_h, WHITE);
    canvas.rect_outline(lx, ly, legend_w, legend_h, BLACK);
    for (i, s) in chart.series.iter().enumerate() {
        let row_y = ly + 8 + i as i64 * 14;
        canvas.line(lx + 6, row_y + 3, lx + 26, row_y + 3, s.color, 2);
        canvas.text(lx + 32, row_y, &s.name, BLACK, legend_scale);
    }

    canvas.save_png(path)
}

/// A 2x2 annotated heat grid (rows = actual, columns = predicted).
pub(crate) struct ConfusionGrid {
    pub title: String,
    /// `cells[row][col]`, row 0 = actual positive, col 0 = predicted positive.
    pub cells: [[usize; 2]; 2],
}

pub(crate) fn render_confusion_grid(grid: &ConfusionGrid, path: &Path) -> Result<(), std::io::Error> {
    const W: u32 = 640;
    const H: u32 = 560;
    const LEFT: i64 = 150;
    const TOP: i64 = 110;
    const CELL: i64 = 200;

    let mut canvas = Canvas::new(W, H, WHITE);
    let max = grid.cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;

    let row_labels = ["positive", "negative"];
    let col_labels = ["positive", "negative"];

    canvas.text(
        (W as i64 - Canvas::text_width(&grid.title, 2)) / 2,
        14,
        &grid.title,
        BLACK,
        2,
    );
    let pred = "predicted";
    canvas.text(
        LEFT + CELL - Canvas::text_width(pred, 1) / 2,
        TOP - 48,
        pred,
        BLACK,
        1,
    );
    let actual = "actual";
    canvas.text(12, TOP + CELL - 4, actual, BLACK, 1);

    for (r, row) in grid.cells.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            let x = LEFT + c as i64 * CELL;
            let y = TOP + r as i64 * CELL;
            // deeper blue for larger counts
            let t = count as f64 / max;
            let shade = [
                (255.0 - 190.0 * t) as u8,
                (255.0 - 140.0 * t) as u8,
                255,
            ];
            canvas.fill_rect(x, y, CELL, CELL, shade);
            canvas.rect_outline(x, y, CELL, CELL, BLACK);
            let label = count.to_string();
            let scale = 3;
            let text_color = if t > 0.55 { WHITE } else { BLACK };
            canvas.text(
                x + (CELL - Canvas::text_width(&label, scale)) / 2,
                y + CELL / 2 - 10,
                &label,
                text_color,
                scale,
            );
        }
    }
    for (c, lab) in col_labels.iter().enumerate() {
        canvas.text(
            LEFT + c as i64 * CELL + (CELL - Canvas::text_width(lab, 1)) / 2,
            TOP - 24,
            lab,
            BLACK,
            1,
        );
    }
    for (r, lab) in row_labels.iter().enumerate() {
        canvas.text(
            LEFT - Canvas::text_width(lab, 1) - 16,
            TOP + r as i64 * CELL + CELL / 2 - 4,
            lab,
            BLACK,
            1,
        );
    }

    canvas.save_png(path)
}
