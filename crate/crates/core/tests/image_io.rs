use gramstyle::image::{decode, deprocess, load, preprocess, resize_bilinear, save, RawImage};
use gramstyle::network::VGG_MEAN;
use gramstyle::tensor::{Shape3, Tensor3};

fn gradient(h: usize, w: usize) -> RawImage {
    RawImage::from_fn(h, w, |y, x| [(y * 255 / h.max(1)) as u8, (x * 255 / w.max(1)) as u8, ((x + y) % 256) as u8])
}

#[test]
fn ppm_and_png_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = gradient(13, 21);
    for name in ["a.ppm", "b.png", "c.PNG"] {
        let path = dir.path().join(name);
        save(&path, &img).unwrap();
        assert_eq!(load(&path).unwrap(), img, "{name}");
    }
    let ppm = std::fs::read(dir.path().join("a.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n21 13\n255\n"));
    assert_eq!(ppm.len(), 13 + 3 * 13 * 21);
}

#[test]
fn malformed_files_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.ppm");
    std::fs::write(&empty, b"").unwrap();
    assert!(load(&empty).is_err());
    assert!(load(dir.path().join("missing.ppm")).is_err());
    assert!(decode(b"P6\n2 2\n255\n\x00\x01").is_err());
    assert!(decode(b"P6\n2 2\n65535\n").is_err());
    assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
    assert!(decode(b"\x89PNG\r\n\x1a\nrubbish").is_err());
}

#[test]
fn preprocessing_round_trip() {
    let img = gradient(9, 7);
    let t = preprocess(&img, &VGG_MEAN).unwrap();
    assert_eq!(t.shape(), Shape3::new(3, 9, 7));
    assert_eq!(t.at(1, 0, 3), img.get(0, 3)[1] as f64 - VGG_MEAN[1]);
    assert_eq!(deprocess(&t, &VGG_MEAN).unwrap(), img);
    let zero = deprocess(&Tensor3::zeros(Shape3::new(3, 2, 2)), &VGG_MEAN).unwrap();
    assert!(zero.pixels.chunks(3).all(|p| p == [124, 117, 104]));
    let wild = Tensor3::from_fn(Shape3::new(3, 1, 2), |_, _, x| if x == 0 { -1e6 } else { 1e6 });
    assert_eq!(deprocess(&wild, &VGG_MEAN).unwrap().pixels, vec![0, 0, 0, 255, 255, 255]);
}

#[test]
fn resizing() {
    let img = gradient(6, 5);
    assert_eq!(resize_bilinear(&img, 6, 5).unwrap(), img);
    let flat = RawImage::from_fn(2, 2, |_, _| [17, 200, 3]);
    assert_eq!(resize_bilinear(&flat, 4, 4).unwrap(), RawImage::from_fn(4, 4, |_, _| [17, 200, 3]));
    assert_eq!(resize_bilinear(&flat, 3, 7).unwrap(), RawImage::from_fn(3, 7, |_, _| [17, 200, 3]));
    // 1x2 ramp [0, 100] upsampled to 1x4 samples source positions -0.25, 0.25, 0.75, 1.25
    let ramp = RawImage::from_fn(1, 2, |_, x| [(x * 100) as u8; 3]);
    let up = resize_bilinear(&ramp, 1, 4).unwrap();
    let row: Vec<u8> = (0..4).map(|x| up.get(0, x)[0]).collect();
    assert_eq!(row, vec![0, 25, 75, 100]);
    assert!(resize_bilinear(&img, 0, 3).is_err());
    assert_eq!(resize_bilinear(&img, 3, 2).unwrap().pixels.len(), 18);
}
