use faceforge::toygen::*;
use std::time::Instant;
#[test]
fn tmpviz() {
    let gen = ToyGenerator::new(GeneratorConfig { seed: 42, ..Default::default() }).unwrap();
    let w = gen.mean_latent(64, 1).unwrap();
    let t = Instant::now();
    let (raw, full) = gen.generate(&w, &gen.pose(0.0, 0.0).unwrap()).unwrap();
    println!("first generate: {:?}", t.elapsed());
    let t = Instant::now();
    for _ in 0..5 { gen.render_raw(&w, &gen.pose(0.1, 0.0).unwrap()).unwrap(); }
    println!("render_raw x5 (no grad): {:?}", t.elapsed());
    // blob statistics: how much does the render deviate from the background?
    let mean: f64 = raw.channel(0).iter().sum::<f64>() / raw.channel(0).len() as f64;
    let max = raw.channel(0).iter().cloned().fold(0.0f64, f64::max);
    let min = raw.channel(0).iter().cloned().fold(1.0f64, f64::min);
    println!("raw R stats: mean {mean:.3} min {min:.3} max {max:.3}");
    raw.save_png(std::path::Path::new("/tmp/raw0.png")).unwrap();
    full.save_png(std::path::Path::new("/tmp/full0.png")).unwrap();
    let img2 = gen.render_raw(&w, &gen.pose(0.35, 0.0).unwrap()).unwrap();
    img2.save_png(std::path::Path::new("/tmp/raw_yaw.png")).unwrap();
    let w2 = gen.map_latent(&vec![0.5; 32]).unwrap();
    let img3 = gen.render_raw(&w2, &gen.pose(0.0, 0.0).unwrap()).unwrap();
    img3.save_png(std::path::Path::new("/tmp/raw_w2.png")).unwrap();
    // centroid shift with yaw (weighted by luma deviation from bg)
    let centroid = |img: &faceforge::Image| {
        let (mut sx, mut sw) = (0.0, 0.0);
        for y in 0..img.height() { for x in 0..img.width() {
            let p = img.get(y, x);
            let l = (p[0]+p[1]+p[2])/3.0;
            let d = (l - 0.33f64).abs();
            sx += d * x as f64; sw += d;
        }}
        sx / sw
    };
    println!("centroid x at yaw 0: {:.2}, at yaw 0.35: {:.2}", centroid(&raw), centroid(&img2));
}
