use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use propfield::pipeline::{Pipeline, PipelineConfig, ProviderMode, StageReport};
use propfield::synthetic::{generate_scene, SyntheticSpec};

#[derive(Parser)]
#[command(name = "propfield", version, about = "Dense physical property fields from posed RGB-D views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and clean source points from the depth maps.
    Extract(StageArgs),
    /// Fuse patch embeddings onto the source points.
    Fuse(StageArgs),
    /// Caption the canonical view and ask for a material dictionary.
    Propose(StageArgs),
    /// Regress the property onto every fused point.
    Predict(StageArgs),
    /// Integrate mass from the density field.
    Mass(StageArgs),
    /// Score predictions against ground truth.
    Eval {
        #[command(flatten)]
        stage: StageArgs,
        /// Rows of {scene, pred, gt} as a JSON array or JSON lines.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
    },
    /// Write the field and PCA feature colors as PLY.
    Export {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        ascii: bool,
    },
    /// extract, fuse, propose, predict, mass (for density) and export.
    Run(StageArgs),
    /// Render a synthetic scene with ground truth and a matching pipeline.json.
    Synth {
        #[arg(long, value_enum)]
        shape: Preset,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Norm of the mock embedding noise.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        cameras: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Plate,
    Cube,
    HollowBox,
    TwoMaterialBox,
    Sphere,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Mock,
    File,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum Property {
    Density,
    Friction,
    Hardness,
    Youngs,
    Thermal,
}

#[derive(Args, Clone)]
struct StageArgs {
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Artifact directory; falls back to the config's cache_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PipelineConfig as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    provider: Option<Provider>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    property: Option<Property>,
    #[arg(long)]
    no_thickness: bool,
    #[arg(long)]
    retrieval: bool,
    #[arg(long)]
    uniform_feature: bool,
}

impl StageArgs {
    fn config(&self) -> propfield::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(p) = self.provider {
            cfg.provider.mode = match p {
                Provider::Mock => ProviderMode::Mock,
                Provider::File => ProviderMode::File,
                Provider::Http => ProviderMode::Http,
            };
        }
        if let Some(e) = &self.endpoint {
            cfg.provider.endpoint = Some(e.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = self.property {
            cfg.property = match p {
                Property::Density => "mass_density",
                Property::Friction => "friction",
                Property::Hardness => "hardness",
                Property::Youngs => "youngs_modulus",
                Property::Thermal => "thermal_conductivity",
            }
            .into();
        }
        cfg.no_thickness |= self.no_thickness;
        cfg.kernel.retrieval |= self.retrieval;
        cfg.uniform_feature |= self.uniform_feature;
        Ok(cfg)
    }

    fn pipeline(&self, tweak: impl FnOnce(&mut PipelineConfig)) -> propfield::Result<Pipeline> {
        let mut cfg = self.config()?;
        tweak(&mut cfg);
        let out = self
            .out
            .clone()
            .or_else(|| cfg.cache_dir.clone())
            .ok_or_else(|| propfield::Error::Config("no --out given and no cache_dir in the config".into()))?;
        Pipeline::new(self.scene.clone(), out, cfg)
    }
}

fn print(report: &StageReport) {
    if report.cached {
        println!("{}: up to date", report.stage);
    } else {
        println!("{}: wrote {}", report.stage, report.outputs.join(", "));
    }
}

fn synth(
    preset: Preset,
    out: PathBuf,
    seed: Option<u64>,
    noise: Option<f64>,
    resolution: Option<usize>,
    cameras: Option<usize>,
) -> propfield::Result<()> {
    let mut spec = match preset {
        Preset::Plate => SyntheticSpec::plate(),
        Preset::Cube => SyntheticSpec::cube(),
        Preset::HollowBox => SyntheticSpec::hollow_box(),
        Preset::TwoMaterialBox => SyntheticSpec::two_material_box(),
        Preset::Sphere => SyntheticSpec::sphere(),
    };
    spec.seed = seed.unwrap_or(spec.seed);
    spec.noise = noise.unwrap_or(spec.noise);
    spec.resolution = resolution.unwrap_or(spec.resolution);
    spec.cameras = cameras.unwrap_or(spec.cameras);
    generate_scene(&spec)?.write(&out)?;
    PipelineConfig::for_synthetic(&spec).save(out.join("pipeline.json"))?;
    println!(
        "synth: wrote {} ({} views, true mass {:.6} kg)",
        out.display(),
        spec.cameras,
        spec.mass_kg()
    );
    Ok(())
}

fn run(cli: Cli) -> propfield::Result<()> {
    match cli.command {
        Command::Extract(a) => print(&a.pipeline(|_| ())?.extract()?),
        Command::Fuse(a) => print(&a.pipeline(|_| ())?.fuse()?),
        Command::Propose(a) => print(&a.pipeline(|_| ())?.propose()?),
        Command::Predict(a) => print(&a.pipeline(|_| ())?.predict()?),
        Command::Mass(a) => {
            let p = a.pipeline(|_| ())?;
            print(&p.mass()?);
            let report = std::fs::read_to_string(p.out_dir().join("mass.json"))
                .map_err(|e| propfield::Error::MissingArtifact(format!("mass.json: {e}")))?;
            let v: serde_json::Value = serde_json::from_str(&report).unwrap_or_default();
            println!("mass: {} kg", v["mass_kg"]);
        }
        Command::Eval {
            stage,
            predictions,
            method,
        } => {
            let p = stage.pipeline(|c| {
                if let Some(m) = method {
                    c.eval.method = m;
                }
            })?;
            print(&p.eval(predictions.as_deref())?);
            if let Ok(table) = std::fs::read_to_string(p.out_dir().join("metrics.tsv")) {
                print!("{table}");
            }
        }
        Command::Export { stage, ascii } => print(&stage.pipeline(|c| c.export.ascii |= ascii)?.export()?),
        Command::Run(a) => {
            let p = a.pipeline(|_| ())?;
            for r in p.run_to_prediction()? {
                print(&r);
            }
            print(&p.export()?);
        }
        Command::Synth {
            shape,
            out,
            seed,
            noise,
            resolution,
            cameras,
        } => synth(shape, out, seed, noise, resolution, cameras)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
