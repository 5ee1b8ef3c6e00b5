//! Runs the command-line pipeline in-process on a small circular-motion
//! problem: gen, train, assimilate with the surrogate and the true model,
//! forecast, and eval of both reports.

fn step(args: &[&str]) -> rlda::Result<()> {
    println!("$ rlda {}", args.join(" "));
    match rlda::cli::run(std::iter::once("rlda").chain(args.iter().copied())) {
        0 => Ok(()),
        code => Err(rlda::Error::Config(format!("rlda {} exited with {code}", args[0]))),
    }
}

fn main() -> rlda::Result<()> {
    let root = std::env::temp_dir().join(format!("rlda_pipeline_{}", std::process::id()));
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let (data, run, learned, truth) = (p("data"), p("run"), p("out_learned"), p("out_truth"));

    step(&["gen", "--system", "circle", "--k-train", "4", "--t-train", "100", "--k-test", "3", "--t-test", "100", "--out", &data])?;
    step(&["train", "--data", &data, "--out", &run, "--iterations", "3", "--seed", "1"])?;
    let ckpt = format!("{run}/checkpoint.json");
    step(&["assimilate", "--data", &data, "--checkpoint", &ckpt, "--n", "20", "--rmse-f-horizon", "5", "--out", &learned])?;
    step(&["assimilate", "--data", &data, "--truth-model", "--n", "20", "--out", &truth])?;
    step(&["forecast", "--data", &data, "--horizon", "5", "--out", &learned])?;
    step(&["eval", &format!("{learned}/report.json"), &format!("{truth}/report.json")])?;

    println!("outputs under {}", root.display());
    Ok(())
}
