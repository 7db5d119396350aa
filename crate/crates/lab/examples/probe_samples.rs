//! Per-concept sample quality probe against the cached pipeline.
use unlearn_core::judge::GenerativeState;
use unlearn_core::synthworld::{make_caption, Concept};
use unlearn_lab::config::ExperimentConfig;
use unlearn_lab::scenario::{self, ensure_pretrained, load_pipeline};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = "/tmp/lab-calib".into();
    let paths = ensure_pretrained(&cfg).unwrap();
    let pipeline = load_pipeline(&paths).unwrap();
    let state = GenerativeState { diffusion: &pipeline.diffusion, encoder: &pipeline.encoder, delta: None };

    let n = 12;
    let mut total_hits = 0usize;
    for concept in Concept::vocabulary() {
        let prompt = make_caption(concept);
        let mut hits = 0;
        let mut wrong: std::collections::BTreeMap<String, usize> = Default::default();
        for i in 0..n {
            let img = state.sample_image(&prompt, 100, 5000 + concept.index() as u64 * 100 + i).unwrap();
            let pred = pipeline.classifier.classify(&img).unwrap();
            if pred == concept.index() {
                hits += 1;
            } else {
                *wrong.entry(Concept::from_index(pred).unwrap().slug()).or_default() += 1;
            }
        }
        total_hits += hits;
        println!("{:16} {:2}/{n}  misses: {:?}", concept.slug(), hits, wrong);
    }
    println!("overall: {}/{}", total_hits, 16 * n);

    // Grid of red-circle and assorted samples for eyeballing.
    scenario::save_sample_grid(&state, "an image of a red circle", 100, 777, 4, 2, "/tmp/grid_red_circle.png".as_ref()).unwrap();
    scenario::save_sample_grid(&state, "an image of a blue square", 100, 778, 4, 2, "/tmp/grid_blue_square.png".as_ref()).unwrap();
    scenario::save_sample_grid(&state, "an image of a yellow triangle", 100, 779, 4, 2, "/tmp/grid_yellow_triangle.png".as_ref()).unwrap();
    println!("grids written");
}
