//! Minimal line plots written as PNG files.

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

pub struct LinePlot {
    pub width: usize,
    pub height: usize,
    /// Each series is a polyline; non-finite points break the line.
    pub series: Vec<Vec<(f64, f64)>>,
    pub log_y: bool,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
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
}

impl LinePlot {
    pub fn new(series: Vec<Vec<(f64, f64)>>) -> Self {
        Self {
            width: 640,
            height: 400,
            series,
            log_y: false,
        }
    }

    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts = self
            .series
            .iter()
            .flatten()
            .map(|&(x, y)| (x, if self.log_y { y.log10() } else { y }))
            .filter(|(x, y)| x.is_finite() && y.is_finite());
        let mut b: Option<(f64, f64, f64, f64)> = None;
        for (x, y) in pts {
            b = Some(match b {
                None => (x, x, y, y),
                Some((a, c, d, e)) => (a.min(x), c.max(x), d.min(y), e.max(y)),
            });
        }
        b.map(|(x0, x1, y0, y1)| {
            let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            let (x0, x1) = pad(x0, x1);
            let (y0, y1) = pad(y0, y1);
            (x0, x1, y0, y1)
        })
    }

    pub fn render(&self) -> Vec<u8> {
        let (w, h) = (self.width, self.height);
        let mut c = Canvas {
            w,
            h,
            px: vec![[255, 255, 255]; w * h],
        };
        let margin = (w.min(h) / 12).clamp(2, 30) as i64;
        let (left, right, top, bottom) = (margin, w as i64 - margin, margin, h as i64 - margin);
        let axis = [90, 90, 90];
        c.line((left, bottom), (right, bottom), axis);
        c.line((left, top), (left, bottom), axis);
        if let Some((x0, x1, y0, y1)) = self.bounds() {
            let map = |x: f64, y: f64| {
                let y = if self.log_y { y.log10() } else { y };
                let px = left as f64 + (x - x0) / (x1 - x0) * (right - left) as f64;
                let py = bottom as f64 - (y - y0) / (y1 - y0) * (bottom - top) as f64;
                (px.round() as i64, py.round() as i64)
            };
            for (k, s) in self.series.iter().enumerate() {
                let color = PALETTE[k % PALETTE.len()];
                let mut prev: Option<(i64, i64)> = None;
                for &(x, y) in s {
                    let ok = x.is_finite() && y.is_finite() && (!self.log_y || y > 0.0);
                    let cur = ok.then(|| map(x, y));
                    if let (Some(a), Some(b)) = (prev, cur) {
                        c.line(a, b, color);
                    }
                    prev = cur;
                }
            }
        }
        encode_png(&c)
    }
}

fn encode_png(c: &Canvas) -> Vec<u8> {
    let raw: Vec<u8> = c.px.iter().flatten().copied().collect();
    let img = image::RgbImage::from_raw(c.w as u32, c.h as u32, raw).expect("buffer matches canvas size");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}
