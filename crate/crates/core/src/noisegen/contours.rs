//! 8-connected components and Moore-neighbour boundary tracing.

use std::collections::VecDeque;

use crate::grid::{BinaryMask, Size};

/// One 8-connected foreground component and its outer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    /// Closed boundary, clockwise, starting at the top-left-most pixel.
    pub boundary: Vec<(usize, usize)>,
    /// Flattened indices of the component's pixels, ascending.
    pub pixels: Vec<usize>,
    pub area: usize,
    pub centroid: (f64, f64),
}

impl Contour {
    pub fn start(&self) -> (usize, usize) {
        self.boundary[0]
    }

    pub fn draw(&self, mask: &mut BinaryMask) {
        let bits = mask.bits_mut();
        for &i in &self.pixels {
            bits[i] = true;
        }
    }

    pub fn overlaps(&self, mask: &BinaryMask) -> bool {
        let bits = mask.bits();
        self.pixels.iter().any(|&i| bits[i])
    }
}

// Clockwise on screen (y grows downward), starting west.
const NEIGHBOURS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// Component labels (`0` = background, components numbered from 1 in raster
/// order of their first pixel) and the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let Size { width, height } = mask.size();
    let bits = mask.bits();
    let mut labels = vec![0u32; bits.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if !bits[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if bits[j] && labels[j] == 0 {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, count as usize)
}

/// One contour per 8-connected component, ordered by the (row, column) of
/// each component's top-left-most pixel.
pub fn extract_contours(mask: &BinaryMask) -> Vec<Contour> {
    let size = mask.size();
    let (labels, count) = label_components(mask);
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            pixels[l as usize - 1].push(i);
        }
    }
    pixels
        .into_iter()
        .map(|px| {
            let boundary = trace_boundary(mask, size.coords(px[0]));
            let n = px.len() as f64;
            let (sx, sy) = px.iter().fold((0.0, 0.0), |(sx, sy), &i| {
                let (x, y) = size.coords(i);
                (sx + x as f64, sy + y as f64)
            });
            Contour {
                boundary,
                area: px.len(),
                centroid: (sx / n, sy / n),
                pixels: px,
            }
        })
        .collect()
}

/// Moore-neighbour tracing from the first raster pixel of a component,
/// entered from the west. Tracing stops when the walk repeats its first
/// move, i.e. re-enters the second boundary pixel from the same side.
pub fn trace_boundary(mask: &BinaryMask, start: (usize, usize)) -> Vec<(usize, usize)> {
    let Size { width, height } = mask.size();
    let fg = |x: isize, y: isize| {
        x >= 0 && y >= 0 && x < width as isize && y < height as isize && mask.get(x as usize, y as usize)
    };
    // (pixel, direction index of the backtrack neighbour)
    let step = |p: (isize, isize), back: usize| -> Option<((isize, isize), usize)> {
        for t in 1..=8 {
            let d = (back + t) % 8;
            let q = (p.0 + NEIGHBOURS[d].0, p.1 + NEIGHBOURS[d].1);
            if fg(q.0, q.1) {
                let prev = (back + t + 7) % 8;
                let b = (p.0 + NEIGHBOURS[prev].0, p.1 + NEIGHBOURS[prev].1);
                let rel = (b.0 - q.0, b.1 - q.1);
                let back_q = NEIGHBOURS
                    .iter()
                    .position(|&o| o == rel)
                    .expect("scan neighbours are adjacent");
                return Some((q, back_q));
            }
        }
        None
    };
    let s = (start.0 as isize, start.1 as isize);
    let mut boundary = vec![start];
    let Some(first) = step(s, 0) else {
        return boundary;
    };
    let mut state = first;
    loop {
        boundary.push((state.0 .0 as usize, state.0 .1 as usize));
        state = step(state.0, state.1).expect("component has a neighbour");
        if state == first {
            break;
        }
    }
    if boundary.len() > 1 && boundary.last() == Some(&start) {
        boundary.pop();
    }
    boundary
}

/// Pixels enclosed by a closed 8-connected boundary (boundary included).
pub fn fill_contour(boundary: &[(usize, usize)], size: Size) -> BinaryMask {
    let mut out = BinaryMask::empty(size.width, size.height);
    if boundary.is_empty() {
        return out;
    }
    let x0 = boundary.iter().map(|p| p.0).min().unwrap_or(0);
    let x1 = boundary.iter().map(|p| p.0).max().unwrap_or(0);
    let y0 = boundary.iter().map(|p| p.1).min().unwrap_or(0);
    let y1 = boundary.iter().map(|p| p.1).max().unwrap_or(0);
    // local box padded by one pixel on every side
    let (bw, bh) = (x1 - x0 + 3, y1 - y0 + 3);
    let mut wall = vec![false; bw * bh];
    for &(x, y) in boundary {
        wall[(y - y0 + 1) * bw + (x - x0 + 1)] = true;
    }
    let mut outside = vec![false; bw * bh];
    let mut stack = vec![0usize];
    outside[0] = true;
    while let Some(i) = stack.pop() {
        let (x, y) = (i % bw, i / bw);
        let mut visit = |j: usize| {
            if !wall[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < bw {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - bw);
        }
        if y + 1 < bh {
            visit(i + bw);
        }
    }
    for ly in 1..bh - 1 {
        for lx in 1..bw - 1 {
            if !outside[ly * bw + lx] {
                out.set(lx - 1 + x0, ly - 1 + y0, true);
            }
        }
    }
    out
}

/// Union of the filled contours.
pub fn fill_contours(contours: &[Contour], size: Size) -> BinaryMask {
    let mut out = BinaryMask::empty(size.width, size.height);
    for c in contours {
        let filled = fill_contour(&c.boundary, size);
        for (o, &f) in out.bits_mut().iter_mut().zip(filled.bits()) {
            *o |= f;
        }
    }
    out
}

/// Fills background regions not 4-connected to the image border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let Size { width, height } = mask.size();
    let bits = mask.bits();
    let mut outside = vec![false; bits.len()];
    let mut stack = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
            if border && !bits[i] {
                outside[i] = true;
                stack.push(i);
            }
        }
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % width, i / width);
        let mut visit = |j: usize| {
            if !bits[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < width {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - width);
        }
        if y + 1 < height {
            visit(i + width);
        }
    }
    let filled = outside.iter().map(|&o| !o).collect();
    BinaryMask::from_bits(width, height, filled).expect("same size")
}
