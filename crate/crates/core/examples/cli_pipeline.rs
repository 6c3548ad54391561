//! Drive the command-line pipeline from code with a deliberately small
//! configuration. The same JSON works with the `vmat-latent` binary.

use serde_json::json;
use vmat_latent::cli::{run, EXIT_OK};

fn main() {
    let dir = std::env::temp_dir().join("vmat-latent-pipeline");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.json");
    let cfg = json!({
        "generator": { "n_arcs": 40 },
        "pca_dims": [4, 8],
        "training": {
            "grid": [{ "variational": true, "k": 2, "d": 8, "alpha": 0.01 }],
            "schedule": { "max_epochs": 2 }
        },
        "position": {
            "spaces": ["full_dao", "pca_d8", "vae_k2_d8_a0.01"],
            "trials": 2,
            "t_d": [0.01],
            "stopping": { "max_iterations": 200 }
        },
        "dose": { "spaces": ["full_dao", "pca_d8"], "trials": 2, "iterations": 100 },
        "traverse": { "model": "vae_k2_d8_a0.01", "dim": 0, "frames": 5 }
    });
    std::fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = dir.join("out");
    for command in ["gen-data", "fit-pca", "train", "eval-recon", "opt-position", "opt-dose", "traverse", "report"] {
        let code = run([
            "vmat-latent",
            command,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        println!("{command:<13} exit {code}");
        if code != EXIT_OK {
            std::process::exit(code);
        }
    }
    println!("report: {}", out.join("report.md").display());
}
