//! Minimal flag parser: `--key value` pairs, boolean switches, repeated
//! keys, and a `key=value` config file merged underneath the flags.

pub struct Args {
    pairs: Vec<(String, String)>,
}

const BOOL_FLAGS: &[&str] = &["standardize", "antithetic", "help"];

impl Args {
    pub fn parse(argv: &[String]) -> Result<Args, String> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < argv.len() {
            let arg = &argv[i];
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| format!("expected a --flag, got `{arg}`"))?;
            if let Some((k, v)) = key.split_once('=') {
                pairs.push((k.to_string(), v.to_string()));
                i += 1;
            } else if BOOL_FLAGS.contains(&key) {
                pairs.push((key.to_string(), "true".to_string()));
                i += 1;
            } else {
                let val = argv
                    .get(i + 1)
                    .ok_or_else(|| format!("flag --{key} needs a value"))?;
                pairs.push((key.to_string(), val.clone()));
                i += 2;
            }
        }
        let mut args = Args { pairs };
        if let Some(path) = args.get("config").map(str::to_string) {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| format!("cannot read config `{path}`: {e}"))?;
            let mut defaults = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| format!("config line {}: expected key=value", lineno + 1))?;
                defaults.push((k.trim().to_string(), v.trim().to_string()));
            }
            // flags take precedence: defaults go underneath
            defaults.extend(args.pairs);
            args.pairs = defaults;
        }
        Ok(args)
    }

    /// Last occurrence wins (flags override config-file defaults).
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.pairs.iter().filter(|(k, _)| k == key).map(|(_, v)| v.as_str()).collect()
    }

    pub fn require(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("missing required flag --{key}"))
    }

    pub fn has(&self, key: &str) -> bool {
        self.get(key).is_some_and(|v| v != "false")
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("bad value `{v}` for --{key}")),
        }
    }
}
