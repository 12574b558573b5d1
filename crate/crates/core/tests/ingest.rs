use std::fs::File;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use tiff::encoder::{colortype, TiffEncoder};

use seglab::dataset::io::{load_image, load_mask, read_split_manifest};
use seglab::dataset::Split;
use seglab::experiment::{
    load_data, parse_config_str, prepare, run_experiment, ExperimentConfig, RunOptions, DATA_ROOT_ENV,
    RESULTS_FILE, SPLITS_FILE,
};
use seglab::metrics::read_results;

fn write_slide(path: &Path, h: u32, w: u32, seed: u16) {
    let mut enc = TiffEncoder::new(File::create(path).unwrap()).unwrap();
    for page in 0..8u16 {
        let data: Vec<u16> = (0..h * w)
            .map(|i| if page == 0 { (i as u16).wrapping_mul(7).wrapping_add(seed) } else { 60000 })
            .collect();
        enc.write_image::<colortype::Gray16>(w, h, &data).unwrap();
    }
}

fn write_mask(path: &Path, h: u32, w: u32) {
    let img = GrayImage::from_fn(w, h, |x, y| Luma([if x < w / 2 && y < h / 3 { 255 } else { 0 }]));
    img.save(path).unwrap();
}

fn config(text: &str, root: &Path) -> ExperimentConfig {
    let full = format!("data.root = \"{}\"\noutput_dir = \"{}\"\n{text}", root.display(), root.join("out").display());
    parse_config_str(&full).unwrap()
}

#[test]
fn slides_are_tiled_split_per_source_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut manifest = String::from("image,mask,dataset\n");
    for i in 0..5 {
        write_slide(&root.join(format!("s{i}.tif")), 481, 500, i as u16);
        write_mask(&root.join(format!("s{i}_mask.png")), 481, 500);
        manifest.push_str(&format!("s{i}.tif,s{i}_mask.png,dermatomyositis\n"));
    }
    std::fs::write(root.join("manifest.csv"), manifest).unwrap();
    let cfg = config(
        "dataset = \"dermatomyositis\"\ndata.manifest = \"manifest.csv\"\ndata.val_ratio = 0.2\ndata.test_ratio = 0.2\n",
        root,
    );
    assert_eq!(cfg.in_channels(), 1);

    let records = prepare(&cfg).unwrap();
    assert_eq!(records.len(), 20);
    let on_disk = read_split_manifest(&cfg.output_dir.join(SPLITS_FILE)).unwrap();
    assert_eq!(on_disk, records);
    for i in 0..5 {
        let splits: Vec<Split> = records
            .iter()
            .filter(|r| r.path.file_name().unwrap().to_str().unwrap().starts_with(&format!("s{i}_")))
            .map(|r| r.split)
            .collect();
        assert_eq!(splits.len(), 4);
        assert!(splits.iter().all(|s| *s == splits[0]), "slide {i} straddles splits");
    }

    // The first tile holds the DAPI page at full 16-bit precision.
    let tile = load_image(&cfg.cache_dir().join("images/s3_r0_c0.png")).unwrap();
    assert_eq!((tile.channels, tile.height, tile.width), (1, 480, 480));
    for (x, expected) in [(0usize, 3u16), (1, 10), (479, (479u16).wrapping_mul(7).wrapping_add(3))] {
        assert_eq!(tile.get(0, 0, x), expected as f32 / 65535.0);
    }
    // Bottom-right tile is mostly zero padding.
    let corner = load_image(&cfg.cache_dir().join("images/s3_r1_c1.png")).unwrap();
    assert_eq!(corner.get(0, 1, 0), 0.0);
    let corner_mask = load_mask(&cfg.cache_dir().join("masks/s3_r1_c1.png")).unwrap();
    assert_eq!(corner_mask.foreground_count(), 0);

    let data = load_data(&cfg).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (12, 4, 4));
}

#[test]
fn lesion_images_are_resized_and_train_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut manifest = String::from("image,mask,dataset\n");
    for i in 0..6u32 {
        let (h, w) = (150 + 17 * i, 210 - 9 * i);
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, (i * 40) as u8]));
        let ext = if i == 0 { "jpg" } else { "png" };
        img.save(root.join(format!("l{i}.{ext}"))).unwrap();
        write_mask(&root.join(format!("l{i}_seg.png")), h, w);
        manifest.push_str(&format!("l{i}.{ext},l{i}_seg.png,dermofit\n"));
    }
    std::fs::write(root.join("lesions.csv"), manifest).unwrap();
    let cfg = config(
        r#"
dataset = "dermofit"
data.manifest = "lesions.csv"
grid.encoder = ["tiny"]
train.epochs = 1
train.batch_size = 2
train.seeds = [0]
"#,
        root,
    );
    let data = load_data(&cfg).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (5, 0, 1));
    for s in data.train.iter().chain(&data.test) {
        assert_eq!((s.image.channels, s.image.height, s.image.width), (3, 224, 224));
        assert!(s.mask.data.iter().all(|&v| v <= 1));
        assert!(s.mask.foreground_count() > 0);
    }

    let outcome = run_experiment(&cfg, RunOptions::default()).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    assert_eq!(read_results(&cfg.output_dir.join(RESULTS_FILE)).unwrap().len(), 3);
}

#[test]
fn fixed_split_uses_manifest_tags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let tags = ["train", "train", "val", "test"];
    let mut manifest = String::from("image,mask,dataset,split\n");
    for (i, tag) in tags.iter().enumerate() {
        RgbImage::from_pixel(40, 30, Rgb([10, 20, 30])).save(root.join(format!("i{i}.png"))).unwrap();
        write_mask(&root.join(format!("m{i}.png")), 30, 40);
        manifest.push_str(&format!("i{i}.png,m{i}.png,isic2017,{tag}\n"));
    }
    std::fs::write(root.join("isic.csv"), manifest).unwrap();
    let cfg = config("dataset = \"isic2017\"\ndata.manifest = \"isic.csv\"\n", root);
    let records = prepare(&cfg).unwrap();
    let got: Vec<&str> = records.iter().map(|r| r.split.as_str()).collect();
    assert_eq!(got, tags);
}

#[test]
fn untagged_isic_needs_the_official_count() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    RgbImage::from_pixel(20, 20, Rgb([1, 2, 3])).save(root.join("a.png")).unwrap();
    write_mask(&root.join("a_mask.png"), 20, 20);
    std::fs::write(root.join("isic.csv"), "image,mask,dataset\na.png,a_mask.png,isic2017\n").unwrap();
    let cfg = config("dataset = \"isic2017\"\ndata.manifest = \"isic.csv\"\n", root);
    let err = prepare(&cfg).unwrap_err();
    assert!(err.to_string().contains("2750"), "{err}");
}

#[test]
fn manifest_records_must_match_the_dataset_and_root_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    RgbImage::from_pixel(20, 20, Rgb([1, 2, 3])).save(root.join("a.png")).unwrap();
    write_mask(&root.join("a_mask.png"), 20, 20);
    std::fs::write(root.join("m.csv"), "image,mask,dataset\na.png,a_mask.png,isic2017\n").unwrap();
    std::env::set_var(DATA_ROOT_ENV, root);
    let text = format!(
        "dataset = \"dermofit\"\ndata.manifest = \"m.csv\"\noutput_dir = \"{}\"\n",
        root.join("out").display()
    );
    let cfg = parse_config_str(&text).unwrap();
    assert_eq!(cfg.data_root(), root);
    let err = prepare(&cfg).unwrap_err();
    assert!(err.to_string().contains("isic2017"), "{err}");
}
