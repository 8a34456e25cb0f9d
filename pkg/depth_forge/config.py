import os

from dotenv import load_dotenv

load_dotenv()

# Inference endpoint (OpenAI-compatible chat completions)
DEPTHLM_API_KEY = os.environ.get("DEPTHLM_API_KEY")
DEPTHLM_BASE_URL = os.environ.get("DEPTHLM_BASE_URL", "http://localhost:8000/v1")
DEPTHLM_MODEL = os.environ.get("DEPTHLM_MODEL", "depthlm")

# Logging configuration
LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()

# Worker pool used for image/depth reads and QA rendering
FORGE_WORKERS = int(os.environ.get("FORGE_WORKERS", "4"))
