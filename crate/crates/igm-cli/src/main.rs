//! Command-line driver: menu inspection, rasterization, compliance
//! optimization, shell decoration, and fine-scale validation.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numerical
//! failures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use igm::config::RunConfig;
use igm::macrofe::fine_scale_solve;
use igm::manifold::{builtin_surface, voxelize_shell, InversionSettings, ShellSpec};
use igm::mapping::{design_from_text, design_to_text, unpack};
use igm::marching::extract_isosurface;
use igm::optimizer::{optimize, HistoryRow, Pipeline, Snapshot};
use igm::tdf::{global_volume_fraction, rasterize, DomainBox, RasterGrid, TdfField};
use igm::{Error, Result};

#[derive(Parser)]
#[command(name = "igm", about = "Graded infill microstructure toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the volume law and render a gallery of generating cells.
    Menu {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rasterize a design to PGM (2D) or the binary voxel format (3D).
    Rasterize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: PathBuf,
    },
    /// Run the compliance minimization.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint file.
        #[arg(long)]
        restart: Option<PathBuf>,
    },
    /// Decorate a parametric surface with the planar menu.
    Decorate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the homogenized prediction with a fine-scale solve.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        design: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(threads) = std::env::var("IGM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Menu { config } => cmd_menu(config),
        Command::Rasterize { config, design } => cmd_rasterize(config, design),
        Command::Optimize { config, restart } => cmd_optimize(config, restart.as_deref()),
        Command::Decorate { config } => cmd_decorate(config),
        Command::Validate { config, design } => cmd_validate(config, design),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Menu(_) | Error::Expr(_) | Error::Design(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(3),
            }
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_menu(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dim = cfg.problem.as_ref().map(|p| p.dim).unwrap_or(2);
    let menu = cfg.build_menu(dim)?;
    let dir = out_dir(&cfg)?;

    // volume-law CSV: pixel-counted fraction plus the menu's own law
    let samples = cfg.output.law_samples.max(8);
    let mut csv = String::from("zeta,fraction,law_fraction\n");
    let (zlo, zhi) = menu.zeta_range;
    for i in 0..samples {
        let z = zlo + (zhi - zlo) * i as f64 / (samples - 1) as f64;
        let pix = menu.volume_fraction_of_level(z, cfg.output.law_resolution);
        csv.push_str(&format!("{z},{pix},{}\n", menu.volume_law.fraction(z)));
    }
    fs::write(dir.join("volume_law.csv"), csv)?;

    // gallery of cells at evenly spaced level values
    let res = cfg.output.gallery_resolution;
    let count = cfg.output.gallery_count.max(2);
    for g in 0..count {
        let z = zlo + (zhi - zlo) * g as f64 / (count - 1) as f64;
        let mut solid = Vec::with_capacity(res * res);
        for j in 0..res {
            let y2 = -0.5 + (j as f64 + 0.5) / res as f64;
            for i in 0..res {
                let y1 = -0.5 + (i as f64 + 0.5) / res as f64;
                // 3D menus are rendered on their mid-plane slice
                solid.push(menu.cell_indicator(&[y1, y2, 0.0], z) >= 0.0);
            }
        }
        let grid = RasterGrid {
            dim: 2,
            domain: DomainBox::new_2d([-0.5, -0.5], [1.0, 1.0]),
            resolution: [res, res, 1],
            solid,
        };
        let mut f = fs::File::create(dir.join(format!("cell_{g:02}.pgm")))?;
        grid.write_pgm(&mut f)?;
    }
    println!("menu `{}`: law and gallery written to {}", menu.name, dir.display());
    Ok(())
}

fn load_field(cfg: &RunConfig, design: &Path) -> Result<(TdfField, usize)> {
    let problem = cfg.build_problem()?;
    let menu = cfg.build_menu(problem.dim)?;
    let text = fs::read_to_string(design)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", design.display())))?;
    let (dim, values) = design_from_text(&text)?;
    if dim != problem.dim {
        return Err(Error::Design(format!(
            "design dimension {dim} does not match problem dimension {}",
            problem.dim
        )));
    }
    let (map, indicator) = unpack(dim, &values)?;
    let h = cfg.problem.as_ref().expect("validated").h;
    Ok((TdfField::new(menu, map, indicator, h), dim))
}

fn raster_resolution(cfg: &RunConfig, dim: usize) -> [usize; 3] {
    let r = &cfg.output.raster;
    let mut out = [256usize, 128, 1];
    for a in 0..dim.min(r.len()) {
        out[a] = r[a];
    }
    if dim == 2 {
        out[2] = 1;
    }
    out
}

fn write_raster(grid: &RasterGrid, dir: &Path, stem: &str) -> Result<PathBuf> {
    if grid.dim == 2 {
        let path = dir.join(format!("{stem}.pgm"));
        let mut f = fs::File::create(&path)?;
        grid.write_pgm(&mut f)?;
        Ok(path)
    } else {
        let path = dir.join(format!("{stem}.vox"));
        let mut f = fs::File::create(&path)?;
        grid.write_voxel(&mut f)?;
        Ok(path)
    }
}

fn cmd_rasterize(config: &Path, design: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let problem = cfg.build_problem()?;
    let (field, dim) = load_field(&cfg, design)?;
    let dir = out_dir(&cfg)?;
    let res = raster_resolution(&cfg, dim);
    let grid = rasterize(&field, problem.domain, res);
    let path = write_raster(&grid, &dir, "raster")?;
    let vol_raster = grid.solid_fraction();
    let vol_quad =
        global_volume_fraction(&field, problem.domain, &field.menu.volume_law, problem.nelem);
    println!(
        "raster written to {} (pixel volume {:.4}, quadrature volume {:.4})",
        path.display(),
        vol_raster,
        vol_quad
    );
    Ok(())
}

fn cmd_optimize(config: &Path, restart: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let problem = cfg.build_problem()?;
    let menu = cfg.build_menu(problem.dim)?;
    let material = cfg.build_material()?;
    let opt = cfg.build_optimizer()?;
    let h = cfg.problem.as_ref().expect("validated").h;
    let dir = out_dir(&cfg)?;
    let pipeline = Pipeline::new(
        menu,
        material,
        h,
        problem.clone(),
        cfg.zone_counts()?,
        opt.cell_resolution,
    )?;

    let resume = match restart {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let (dim, snap) = Snapshot::from_text(&text)?;
            if dim != problem.dim {
                return Err(Error::Design("checkpoint dimension mismatch".into()));
            }
            Some(snap)
        }
        None => None,
    };
    let fresh_start = resume.is_none();

    let history_path = dir.join("history.csv");
    let mut history_file = if fresh_start {
        let mut f = fs::File::create(&history_path)?;
        writeln!(f, "# config {}", cfg.hash())?;
        writeln!(f, "{}", HistoryRow::csv_header())?;
        f
    } else {
        fs::OpenOptions::new().append(true).create(true).open(&history_path)?
    };

    let checkpoint_every = opt.checkpoint_every;
    let dir_for_iter = dir.clone();
    let outcome = optimize(&pipeline, &opt, resume, |row, design, snap| {
        writeln!(history_file, "{}", row.to_csv())?;
        if checkpoint_every > 0 && row.iter % checkpoint_every == 0 {
            fs::write(
                dir_for_iter.join(format!("checkpoint_{:04}.txt", row.iter)),
                snap.to_text(pipeline.dim()),
            )?;
            fs::write(
                dir_for_iter.join(format!("design_{:04}.txt", row.iter)),
                design_to_text(pipeline.dim(), design),
            )?;
        }
        Ok(())
    })?;

    fs::write(
        dir.join("final_design.txt"),
        design_to_text(pipeline.dim(), &outcome.design),
    )?;

    // final raster
    let (map, indicator) = unpack(pipeline.dim(), &outcome.design)?;
    let field = TdfField::new(pipeline.menu.clone(), map, indicator, h);
    let res = raster_resolution(&cfg, pipeline.dim());
    let grid = rasterize(&field, problem.domain, res);
    write_raster(&grid, &dir, "final_raster")?;

    let mut report = String::new();
    report.push_str(&format!("config {}\n", cfg.hash()));
    report.push_str(&format!("iterations {}\n", outcome.iterations));
    report.push_str(&format!("converged {}\n", outcome.converged));
    report.push_str(&format!("compliance {}\n", outcome.final_compliance));
    report.push_str(&format!("volume {}\n", outcome.final_volume));

    if let Some(v) = &cfg.validate {
        let mut vres = [1usize; 3];
        for a in 0..pipeline.dim().min(v.raster.len()) {
            vres[a] = v.raster[a];
        }
        let vgrid = rasterize(&field, problem.domain, vres);
        let fine = fine_scale_solve(
            &vgrid,
            problem.fixed_faces.clone(),
            problem.tractions.clone(),
            &material,
            h,
        )?;
        let dev = (outcome.final_compliance - fine).abs() / fine;
        report.push_str(&format!("fine_scale_compliance {fine}\n"));
        report.push_str(&format!("fine_scale_deviation {dev}\n"));
    }
    fs::write(dir.join("report.txt"), &report)?;
    println!(
        "optimization finished: compliance {:.4}, volume {:.4} ({} iterations)",
        outcome.final_compliance, outcome.final_volume, outcome.iterations
    );
    Ok(())
}

fn cmd_decorate(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let d = cfg
        .decorate
        .clone()
        .ok_or_else(|| Error::Config("missing [decorate] section".into()))?;
    let menu = cfg.build_menu(2)?;
    let dir = out_dir(&cfg)?;

    let empty_box = d.voxel_resolution.iter().any(|&r| r == 0)
        || d.voxel_extents.iter().any(|&e| !(e > 0.0));
    if empty_box {
        let grid = RasterGrid {
            dim: 3,
            domain: DomainBox::new_3d([0.0; 3], [0.0; 3]),
            resolution: [0, 0, 0],
            solid: Vec::new(),
        };
        let mut f = fs::File::create(dir.join("shell.vox"))?;
        grid.write_voxel(&mut f)?;
        println!("empty voxel box: wrote an empty grid");
        return Ok(());
    }

    let surface = builtin_surface(&d.surface, d.surface_extent).expect("validated");
    let spec = ShellSpec {
        surface,
        menu,
        indicator: igm::mapping::LevelIndicator::constant(3, d.zeta),
        h: d.h,
        h0: d.h0,
        delta: d.delta,
        inversion: InversionSettings { seeds: d.seeds, tol: d.newton_tol, ..Default::default() },
    };
    let domain = DomainBox::new_3d(
        [d.voxel_origin[0], d.voxel_origin[1], d.voxel_origin[2]],
        [d.voxel_extents[0], d.voxel_extents[1], d.voxel_extents[2]],
    );
    let res = [
        d.voxel_resolution[0],
        d.voxel_resolution[1],
        d.voxel_resolution[2],
    ];
    let (grid, values) = voxelize_shell(&spec, domain, res)?;
    let mut f = fs::File::create(dir.join("shell.vox"))?;
    grid.write_voxel(&mut f)?;
    println!(
        "shell voxelized: {} of {} voxels solid",
        grid.solid.iter().filter(|&&s| s).count(),
        grid.len()
    );
    if d.stl {
        let mesh = extract_isosurface(&values, res, domain);
        let mut f = fs::File::create(dir.join("shell.stl"))?;
        mesh.write_stl(&mut f)?;
        println!("isosurface: {} triangles", mesh.triangles.len());
    }
    Ok(())
}

fn cmd_validate(config: &Path, design: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let problem = cfg.build_problem()?;
    let material = cfg.build_material()?;
    let opt = cfg.build_optimizer()?;
    let h = cfg.problem.as_ref().expect("validated").h;
    let v = cfg
        .validate
        .clone()
        .ok_or_else(|| Error::Config("missing [validate] section".into()))?;
    let (field, dim) = load_field(&cfg, design)?;
    let dir = out_dir(&cfg)?;

    // homogenized prediction at this design
    let pipeline = Pipeline::new(
        field.menu.clone(),
        material,
        h,
        problem.clone(),
        cfg.zone_counts()?,
        opt.cell_resolution,
    )?;
    let design_text = fs::read_to_string(design)?;
    let (_, values) = design_from_text(&design_text)?;
    let ev = pipeline.evaluate(&values)?;

    let mut vres = [1usize; 3];
    for a in 0..dim.min(v.raster.len()) {
        vres[a] = v.raster[a];
    }
    let grid = rasterize(&field, problem.domain, vres);
    let fine = fine_scale_solve(
        &grid,
        problem.fixed_faces.clone(),
        problem.tractions.clone(),
        &material,
        h,
    )?;
    let deviation = (ev.compliance - fine).abs() / fine;
    let mut out = String::from("quantity,value\n");
    out.push_str(&format!("homogenized_compliance,{}\n", ev.compliance));
    out.push_str(&format!("fine_scale_compliance,{fine}\n"));
    out.push_str(&format!("relative_deviation,{deviation}\n"));
    fs::write(dir.join("validation.csv"), &out)?;
    println!(
        "homogenized {:.4} vs fine-scale {:.4}: deviation {:.2}%",
        ev.compliance,
        fine,
        100.0 * deviation
    );
    Ok(())
}
