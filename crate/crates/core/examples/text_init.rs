//! Builds a projection layer from class-description embeddings.
//!
//! With a `.flem` path it reads that table; otherwise it synthesises one.

use faultline::model::{HeadSpec, ModelGraph};
use faultline::tensor::SeededRng;
use faultline::textinit::{average_embeddings, init_projection, load_embeddings, synth_embeddings, InitMode};

fn main() -> faultline::Result<()> {
    let table = match std::env::args().nth(1) {
        Some(path) => load_embeddings(path)?,
        None => {
            let names: Vec<String> = ["cat", "dog", "ship"].iter().map(|s| s.to_string()).collect();
            synth_embeddings(&names, 5, 8, 0)?
        }
    };
    println!(
        "{} classes x {} descriptions x {} dims",
        table.classes(),
        table.descriptions(),
        table.dim()
    );

    let avg = average_embeddings(&table)?;
    for (name, row) in table.class_names().iter().zip(avg.data().chunks(table.dim())) {
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("{name:>8}: |row| = {norm:.4}  {:?}", &row[..row.len().min(4)]);
    }

    let mut rng = SeededRng::new(0, 0);
    let model = ModelGraph::mlp_s(&[16], table.classes(), HeadSpec::Split { latent: table.dim() }, &mut rng)?;
    for mode in [InitMode::Random, InitMode::SinglePrompt, InitMode::MultiDescription] {
        let m = init_projection(&model, mode, Some(&table), &mut SeededRng::new(0, 1))?;
        let w = m.layers()[m.last_layer()].params()[0];
        println!("{:>17}: projection max |w| = {:.4}", mode.name(), w.max_abs());
    }
    Ok(())
}
