//! Glyph world: colored shapes on a dark canvas, and single glyphs sliding
//! in a cardinal direction.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lm::{COLORS, DIRECTIONS, SHAPES};
use crate::vision::{Frame, VisualInput};

pub const CANVAS: usize = 32;
pub const CELL: usize = 8;
pub const VIDEO_FRAMES: usize = 16;
/// Pixels travelled between the first and last frame.
pub const TRAVEL: usize = 10;

const PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.6, 0.0, 1.0],
    [1.0, 0.5, 0.0],
];

const BITMAPS: [[&str; 8]; 3] = [
    [
        "........", ".######.", ".######.", ".######.", ".######.", ".######.", ".######.",
        "........",
    ],
    [
        "..####..", ".######.", "########", "########", "########", "########", ".######.",
        "..####..",
    ],
    [
        "...##...", "...##...", "..####..", "..####..", ".######.", ".######.", "########",
        "########",
    ],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Glyph {
    pub color: usize,
    pub shape: usize,
    /// Top-left corner in pixels.
    pub x: usize,
    pub y: usize,
}

impl Glyph {
    pub fn name(&self) -> String {
        object_name(self.color, self.shape)
    }
}

pub fn object_name(color: usize, shape: usize) -> String {
    format!("{} {}", COLORS[color], SHAPES[shape])
}

/// Every nameable object, color-major.
pub fn all_objects() -> Vec<String> {
    (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| object_name(c, s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn word(self) -> &'static str {
        DIRECTIONS[self as usize]
    }

    pub fn delta(self) -> (i64, i64) {
        match self {
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
            Direction::Up => (0, -1),
            Direction::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scene {
    Still { glyphs: Vec<Glyph> },
    Motion { glyph: Glyph, direction: Direction, frames: usize },
}

impl Scene {
    pub fn objects(&self) -> Vec<String> {
        match self {
            Scene::Still { glyphs } => glyphs.iter().map(Glyph::name).collect(),
            Scene::Motion { glyph, .. } => vec![glyph.name()],
        }
    }
}

/// 1–3 glyphs with distinct colors and shapes in distinct grid cells.
pub fn random_still<R: Rng + ?Sized>(rng: &mut R) -> Scene {
    let n = rng.gen_range(1..=3);
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    let cells_per_side = CANVAS / CELL;
    let mut cells: Vec<usize> = (0..cells_per_side * cells_per_side).collect();
    colors.shuffle(rng);
    shapes.shuffle(rng);
    cells.shuffle(rng);
    let mut picked: Vec<usize> = cells[..n].to_vec();
    picked.sort_unstable();
    let glyphs = (0..n)
        .map(|i| Glyph {
            color: colors[i],
            shape: shapes[i],
            x: (picked[i] % cells_per_side) * CELL,
            y: (picked[i] / cells_per_side) * CELL,
        })
        .collect();
    Scene::Still { glyphs }
}

/// One glyph starting near the canvas centre and travelling `TRAVEL` px.
pub fn random_motion<R: Rng + ?Sized>(rng: &mut R, frames: usize) -> Scene {
    let centre = (CANVAS - CELL) / 2;
    Scene::Motion {
        glyph: Glyph {
            color: rng.gen_range(0..COLORS.len()),
            shape: rng.gen_range(0..SHAPES.len()),
            x: rng.gen_range(centre - 2..=centre + 2),
            y: rng.gen_range(centre - 2..=centre + 2),
        },
        direction: *Direction::ALL.choose(rng).expect("non-empty"),
        frames,
    }
}

fn stamp(frame: &mut Frame, g: &Glyph) {
    for (dy, row) in BITMAPS[g.shape].iter().enumerate() {
        for (dx, ch) in row.bytes().enumerate() {
            let (x, y) = (g.x + dx, g.y + dy);
            if ch == b'#' && x < frame.width && y < frame.height {
                frame.pixel_mut(y, x).copy_from_slice(&PALETTE[g.color]);
            }
        }
    }
}

/// Position of a moving glyph at frame `t`.
pub fn glyph_at(glyph: &Glyph, direction: Direction, frames: usize, t: usize) -> Glyph {
    let step = if frames > 1 {
        ((TRAVEL * t) as f64 / (frames - 1) as f64).round() as i64
    } else {
        0
    };
    let (dx, dy) = direction.delta();
    Glyph {
        x: (glyph.x as i64 + dx * step) as usize,
        y: (glyph.y as i64 + dy * step) as usize,
        ..*glyph
    }
}

pub fn render(scene: &Scene) -> VisualInput {
    match scene {
        Scene::Still { glyphs } => {
            let mut f = Frame::blank(CANVAS, CANVAS, 3);
            glyphs.iter().for_each(|g| stamp(&mut f, g));
            VisualInput::Image(f)
        }
        Scene::Motion {
            glyph,
            direction,
            frames,
        } => VisualInput::Video(
            (0..*frames)
                .map(|t| {
                    let mut f = Frame::blank(CANVAS, CANVAS, 3);
                    stamp(&mut f, &glyph_at(glyph, *direction, *frames, t));
                    f
                })
                .collect(),
        ),
    }
}

/// A glyph recovered from pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub color: usize,
    pub shape: usize,
    pub centroid: (f64, f64),
}

/// Reads glyphs back out of a frame: pixels are grouped by palette color
/// and the shape is identified by its pixel count.
pub fn detect(frame: &Frame) -> Vec<Detection> {
    let counts: Vec<usize> = BITMAPS
        .iter()
        .map(|b| b.iter().map(|r| r.bytes().filter(|&c| c == b'#').count()).sum())
        .collect();
    let mut out = Vec::new();
    for (color, rgb) in PALETTE.iter().enumerate() {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for y in 0..frame.height {
            for x in 0..frame.width {
                if frame.pixel(y, x) == rgb {
                    n += 1;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        if n == 0 {
            continue;
        }
        if let Some(shape) = counts.iter().position(|&c| c == n) {
            out.push(Detection {
                color,
                shape,
                centroid: (sx / n as f64, sy / n as f64),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_have_distinct_areas() {
        let areas: Vec<usize> = BITMAPS
            .iter()
            .map(|b| b.iter().map(|r| r.bytes().filter(|&c| c == b'#').count()).sum())
            .collect();
        assert_eq!(areas, vec![36, 52, 40]);
    }

    #[test]
    fn detection_recovers_stills() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let scene = random_still(&mut rng);
            let Scene::Still { glyphs } = &scene else { unreachable!() };
            let img = render(&scene);
            let mut found: Vec<String> = detect(&img.frames()[0])
                .iter()
                .map(|d| object_name(d.color, d.shape))
                .collect();
            let mut expect: Vec<String> = glyphs.iter().map(Glyph::name).collect();
            found.sort();
            expect.sort();
            assert_eq!(found, expect);
        }
    }

    #[test]
    fn motion_stays_on_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let scene = random_motion(&mut rng, VIDEO_FRAMES);
            let Scene::Motion { glyph, direction, frames } = scene else { unreachable!() };
            for t in 0..frames {
                let g = glyph_at(&glyph, direction, frames, t);
                assert!(g.x + CELL <= CANVAS && g.y + CELL <= CANVAS);
            }
            let end = glyph_at(&glyph, direction, frames, frames - 1);
            let moved = (end.x as i64 - glyph.x as i64, end.y as i64 - glyph.y as i64);
            let (dx, dy) = direction.delta();
            assert_eq!(moved, (dx * TRAVEL as i64, dy * TRAVEL as i64));
        }
    }
}
