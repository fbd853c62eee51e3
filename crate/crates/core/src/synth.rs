//! Procedural image corpora for desk-scale runs.
//!
//! * a ten-class shapes corpus used to pretrain the frozen perceptual and
//!   scoring classifiers;
//! * synthetic 178x218 portraits annotated in the 40-attribute face layout,
//!   with Male, Smiling, Eyeglasses, hair colour and a few other attributes
//!   actually rendered.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array4, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{preprocess, AttributeTable, PreprocessSpec};
use crate::models::ImageBatch;
use crate::{Error, Result};

/// Attribute names of the reference face annotation list, in file order.
pub const FACE_ATTRIBUTES: [&str; 40] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Bald",
    "Bangs",
    "Big_Lips",
    "Big_Nose",
    "Black_Hair",
    "Blond_Hair",
    "Blurry",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Goatee",
    "Gray_Hair",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Oval_Face",
    "Pale_Skin",
    "Pointy_Nose",
    "Receding_Hairline",
    "Rosy_Cheeks",
    "Sideburns",
    "Smiling",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Lipstick",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Young",
];

pub const SHAPE_CLASSES: usize = 10;

type Color = [u8; 3];

fn fill(img: &mut RgbImage, bbox: (f32, f32, f32, f32), color: Color, inside: impl Fn(f32, f32) -> bool) {
    let (w, h) = img.dimensions();
    let x0 = bbox.0.floor().max(0.0) as u32;
    let y0 = bbox.1.floor().max(0.0) as u32;
    let x1 = (bbox.2.ceil().max(0.0) as u32).min(w);
    let y1 = (bbox.3.ceil().max(0.0) as u32).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(x as f32 + 0.5, y as f32 + 0.5) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn ellipse(img: &mut RgbImage, cx: f32, cy: f32, rx: f32, ry: f32, color: Color) {
    fill(img, (cx - rx, cy - ry, cx + rx, cy + ry), color, |x, y| {
        let (u, v) = ((x - cx) / rx, (y - cy) / ry);
        u * u + v * v <= 1.0
    });
}

fn ring(img: &mut RgbImage, cx: f32, cy: f32, r: f32, thickness: f32, color: Color) {
    fill(img, (cx - r, cy - r, cx + r, cy + r), color, |x, y| {
        let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        d <= r && d >= r - thickness
    });
}

fn rect(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Color) {
    fill(img, (x0, y0, x1, y1), color, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1);
}

fn jitter<R: Rng + ?Sized>(c: Color, amount: i32, rng: &mut R) -> Color {
    let mut out = c;
    for v in &mut out {
        *v = (*v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8;
    }
    out
}

fn add_noise<R: Rng + ?Sized>(img: &mut RgbImage, amount: i32, rng: &mut R) {
    for px in img.pixels_mut() {
        for v in &mut px.0 {
            *v = (*v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8;
        }
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Color {
    [rng.random(), rng.random(), rng.random()]
}

fn contrasting<R: Rng + ?Sized>(bg: Color, rng: &mut R) -> Color {
    loop {
        let c = random_color(rng);
        let dist: i32 = c.iter().zip(bg).map(|(&a, b)| (a as i32 - b as i32).abs()).sum();
        if dist > 200 {
            return c;
        }
    }
}

/// Renders one `size` x `size` image of shape class `class`.
pub fn render_shape<R: Rng + ?Sized>(class: usize, size: u32, rng: &mut R) -> RgbImage {
    let bg = random_color(rng);
    let fg = contrasting(bg, rng);
    let mut img = RgbImage::from_pixel(size, size, Rgb(bg));
    let s = size as f32;
    let r = s * rng.random_range(0.18..0.32);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let period = s * rng.random_range(0.08..0.16);
    let phase = rng.random_range(0.0..period);
    match class {
        0 => ellipse(&mut img, cx, cy, r, r, fg),
        1 => rect(&mut img, cx - r, cy - r, cx + r, cy + r, fg),
        2 => fill(&mut img, (cx - r, cy - r, cx + r, cy + r), fg, |x, y| {
            let t = (y - (cy - r)) / (2.0 * r);
            (0.0..=1.0).contains(&t) && (x - cx).abs() <= t * r
        }),
        3 => ring(&mut img, cx, cy, r, r * 0.35, fg),
        4 => {
            let t = r * 0.3;
            rect(&mut img, cx - r, cy - t, cx + r, cy + t, fg);
            rect(&mut img, cx - t, cy - r, cx + t, cy + r, fg);
        }
        5 => fill(&mut img, (0.0, 0.0, s, s), fg, |_, y| ((y + phase) / period) as i32 % 2 == 0),
        6 => fill(&mut img, (0.0, 0.0, s, s), fg, |x, _| ((x + phase) / period) as i32 % 2 == 0),
        7 => fill(&mut img, (0.0, 0.0, s, s), fg, |x, y| {
            (((x + phase) / period) as i32 + ((y + phase) / period) as i32) % 2 == 0
        }),
        8 => fill(&mut img, (0.0, 0.0, s, s), fg, |x, y| ((x + y + phase) / period) as i32 % 2 == 0),
        9 => {
            let d = r * 0.9;
            let rr = r * 0.45;
            ellipse(&mut img, cx - d * 0.7, cy - d * 0.3, rr, rr, fg);
            ellipse(&mut img, cx + d * 0.7, cy + d * 0.3, rr, rr, fg);
        }
        _ => panic!("shape class {class} out of range"),
    }
    add_noise(&mut img, 12, rng);
    img
}

/// Balanced shapes corpus as (images in [-1, 1], class labels).
pub fn shapes_corpus(n: usize, size: u32, seed: u64) -> (ImageBatch, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as usize;
    let mut x = Array4::<f32>::zeros((n, 3, s, s));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % SHAPE_CLASSES;
        let img = render_shape(class, size, &mut rng);
        x.index_axis_mut(Axis(0), i)
            .assign(&preprocess(&image::DynamicImage::ImageRgb8(img), PreprocessSpec { target_size: size }));
        labels.push(class);
    }
    (x, labels)
}

/// Rendered attributes of one synthetic portrait.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceTraits {
    pub male: bool,
    pub smiling: bool,
    pub eyeglasses: bool,
    /// 0 black, 1 blond, 2 brown, 3 gray.
    pub hair: u8,
    pub bald: bool,
    pub bangs: bool,
    pub pale: bool,
    pub mustache: bool,
    pub goatee: bool,
    pub lipstick: bool,
    pub rosy: bool,
}

impl FaceTraits {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let male = rng.random_bool(0.5);
        let hair = rng.random_range(0..4u8);
        FaceTraits {
            male,
            smiling: rng.random_bool(0.5),
            eyeglasses: rng.random_bool(0.35),
            hair,
            bald: male && rng.random_bool(0.1),
            bangs: !male && rng.random_bool(0.3),
            pale: rng.random_bool(0.2),
            mustache: male && rng.random_bool(0.3),
            goatee: male && rng.random_bool(0.2),
            lipstick: !male && rng.random_bool(0.5),
            rosy: rng.random_bool(0.2),
        }
    }

    /// +1/-1 vector over [`FACE_ATTRIBUTES`].
    pub fn annotations(&self) -> Vec<i8> {
        let hair_visible = !self.bald;
        FACE_ATTRIBUTES
            .iter()
            .map(|&name| {
                let on = match name {
                    "Male" => self.male,
                    "Smiling" | "Mouth_Slightly_Open" | "High_Cheekbones" => self.smiling,
                    "Eyeglasses" => self.eyeglasses,
                    "Black_Hair" => hair_visible && self.hair == 0,
                    "Blond_Hair" => hair_visible && self.hair == 1,
                    "Brown_Hair" => hair_visible && self.hair == 2,
                    "Gray_Hair" => hair_visible && self.hair == 3,
                    "Young" => self.hair != 3,
                    "Bald" => self.bald,
                    "Bangs" => self.bangs,
                    "Pale_Skin" => self.pale,
                    "Mustache" => self.mustache,
                    "Goatee" => self.goatee,
                    "No_Beard" => !self.mustache && !self.goatee,
                    "Wearing_Lipstick" | "Heavy_Makeup" => self.lipstick,
                    "Rosy_Cheeks" => self.rosy,
                    _ => false,
                };
                if on {
                    1
                } else {
                    -1
                }
            })
            .collect()
    }
}

pub const FACE_WIDTH: u32 = 178;
pub const FACE_HEIGHT: u32 = 218;

const SKIN: [Color; 4] = [[233, 192, 160], [210, 160, 120], [170, 120, 85], [120, 80, 55]];
const PALE: Color = [246, 228, 218];
const HAIR: [Color; 4] = [[30, 25, 25], [226, 196, 118], [110, 68, 38], [165, 165, 168]];

/// Renders a 178x218 portrait with the given traits.
pub fn render_face<R: Rng + ?Sized>(t: &FaceTraits, rng: &mut R) -> RgbImage {
    let bg = jitter([rng.random_range(60..200), rng.random_range(60..200), rng.random_range(60..200)], 0, rng);
    let mut img = RgbImage::from_pixel(FACE_WIDTH, FACE_HEIGHT, Rgb(bg));
    let scale = rng.random_range(0.93..1.07f32);
    let cx = 89.0 + rng.random_range(-5.0..5.0f32);
    let cy = 112.0 + rng.random_range(-5.0..5.0f32);
    let rx = 40.0 * scale;
    let ry = 52.0 * scale;
    let skin = jitter(if t.pale { PALE } else { SKIN[rng.random_range(0..SKIN.len())] }, 8, rng);
    let hair = jitter(HAIR[t.hair as usize], 10, rng);
    let shirt = jitter(random_color(rng), 0, rng);

    // shoulders
    ellipse(&mut img, cx, cy + ry + 58.0, rx * 2.1, 50.0, shirt);
    // long hair sits behind the face
    if !t.male && !t.bald {
        ellipse(&mut img, cx, cy - 4.0, rx + 15.0, ry + 12.0, hair);
        rect(&mut img, cx - rx - 15.0, cy, cx + rx + 15.0, cy + ry + 40.0, hair);
    }
    // neck and face
    rect(&mut img, cx - rx * 0.38, cy + ry * 0.6, cx + rx * 0.38, cy + ry + 20.0, skin);
    ellipse(&mut img, cx, cy, rx, ry, skin);
    if t.male && !t.bald {
        let (hx, hy) = (rx + 5.0, ry + 6.0);
        let cut = cy - ry * 0.5;
        fill(&mut img, (cx - hx, cy - hy, cx + hx, cut), hair, |x, y| {
            let (u, v) = ((x - cx) / hx, (y - cy) / hy);
            u * u + v * v <= 1.0 && y < cut
        });
    }
    if t.bangs {
        let cut = cy - ry * 0.45;
        fill(&mut img, (cx - rx, cy - ry - 2.0, cx + rx, cut), hair, |x, y| {
            let (u, v) = ((x - cx) / (rx + 1.0), (y - cy) / (ry + 2.0));
            u * u + v * v <= 1.0 && y < cut
        });
    }

    let eye_y = cy - ry * 0.12;
    let eye_dx = rx * 0.42;
    let eye_r = 4.5 * scale;
    for side in [-1.0f32, 1.0] {
        let ex = cx + side * eye_dx;
        ellipse(&mut img, ex, eye_y, eye_r * 1.6, eye_r, [245, 245, 245]);
        ellipse(&mut img, ex, eye_y, eye_r * 0.8, eye_r * 0.8, [40, 30, 30]);
        // brows
        rect(&mut img, ex - 9.0, eye_y - 12.0, ex + 9.0, eye_y - 9.0, jitter(HAIR[t.hair as usize], 0, rng));
    }
    if t.eyeglasses {
        let frame = [20, 20, 24];
        for side in [-1.0f32, 1.0] {
            ring(&mut img, cx + side * eye_dx, eye_y, 12.5 * scale, 3.2, frame);
        }
        rect(&mut img, cx - eye_dx + 12.0, eye_y - 1.5, cx + eye_dx - 12.0, eye_y + 1.5, frame);
    }
    // nose
    let nose = [
        (skin[0] as f32 * 0.82) as u8,
        (skin[1] as f32 * 0.82) as u8,
        (skin[2] as f32 * 0.82) as u8,
    ];
    rect(&mut img, cx - 2.5, cy - 2.0, cx + 2.5, cy + ry * 0.22, nose);
    if t.rosy {
        for side in [-1.0f32, 1.0] {
            ellipse(&mut img, cx + side * rx * 0.55, cy + ry * 0.2, 8.0, 5.0, [222, 120, 120]);
        }
    }
    if t.mustache {
        rect(&mut img, cx - 14.0, cy + ry * 0.3, cx + 14.0, cy + ry * 0.3 + 5.0, hair);
    }
    if t.goatee {
        ellipse(&mut img, cx, cy + ry * 0.82, 11.0, 9.0, hair);
    }

    let mouth_y = cy + ry * 0.48;
    let lips: Color = if t.lipstick { [200, 30, 50] } else { [150, 70, 70] };
    if t.smiling {
        // wide open smile: teeth inside a lower half-ellipse outlined by lips
        let (mw, mh) = (19.0 * scale, 10.0 * scale);
        fill(&mut img, (cx - mw - 3.0, mouth_y - 3.0, cx + mw + 3.0, mouth_y + mh + 3.0), lips, |x, y| {
            let (u, v) = ((x - cx) / (mw + 3.0), (y - mouth_y) / (mh + 3.0));
            y >= mouth_y - 3.0 && u * u + v * v <= 1.0
        });
        fill(&mut img, (cx - mw, mouth_y, cx + mw, mouth_y + mh), [250, 250, 250], |x, y| {
            let (u, v) = ((x - cx) / mw, (y - mouth_y) / mh);
            y >= mouth_y && u * u + v * v <= 1.0
        });
    } else {
        rect(&mut img, cx - 11.0, mouth_y + 2.0, cx + 11.0, mouth_y + 5.5, lips);
    }
    add_noise(&mut img, 6, rng);
    img
}

/// Writes `n` portraits as `<dir>/NNNNNN.png` plus `<dir>/list_attr.txt`, returning the table.
pub fn write_face_folder(dir: impl AsRef<Path>, n: usize, seed: u64) -> Result<AttributeTable> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let traits = FaceTraits::sample(&mut rng);
        let img = render_face(&traits, &mut rng);
        let id = format!("{:06}.png", i + 1);
        img.save(dir.join(&id))?;
        rows.push((id, traits.annotations()));
    }
    let table = AttributeTable::new(FACE_ATTRIBUTES.iter().map(|s| s.to_string()).collect(), rows)?;
    let path = dir.join("list_attr.txt");
    fs::write(&path, table.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}
