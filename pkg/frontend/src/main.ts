import { mountApp } from "./app";
import "./style.css";

mountApp(document.querySelector<HTMLElement>("#app")!);
